"""Stage-by-stage command line driver.

    python -m dyntraj <stage> --config run.cfg --seed 0

Stages: synth, train-dpm, extract, aggregate, match, train-pred, predict,
evaluate, pipeline. Every stage reads and writes fixed file names inside the
configured work directory.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import aggregation, dynamic_points, evaluation, matching, prediction, scene_io
from .config import ConfigError, PipelineConfig, dump_config, load_config

log = logging.getLogger("dyntraj")

STAGES = ["synth", "train-dpm", "extract", "aggregate", "match", "train-pred", "predict", "evaluate"]

FRAMES_DIR = "frames"
GT_FILE = "gt.txt"
MASK_FILE = "mask.png"
HOMOGRAPHY_FILE = "homography.txt"
DPM_FILE = "dpm.pt"
DPM_LOSSES = "dpm_losses.txt"
POINTS_FILE = "dynamic_points.npz"
INSTANCES_FILE = "instances.txt"
TRACKS_PX_FILE = "tracks_px.txt"
TRACKS_FILE = "tracks.txt"
PREDICTOR_FILE = "predictor.pt"
PREDICTOR_LOSSES = "predictor_losses.txt"
PREDICTIONS_FILE = "predictions.txt"
REPORT_FILE = "report.txt"
REPORT_JSON = "report.json"

# artifact -> stage that produces it
PRODUCERS = {
    FRAMES_DIR: "synth", GT_FILE: "synth", DPM_FILE: "train-dpm", POINTS_FILE: "extract",
    INSTANCES_FILE: "aggregate", TRACKS_FILE: "match", TRACKS_PX_FILE: "match",
    PREDICTOR_FILE: "train-pred",
}

EXIT_CONFIG, EXIT_MISSING, EXIT_DATA, EXIT_DIVERGED = 2, 3, 4, 5


class MissingArtifactError(RuntimeError):
    def __init__(self, path, stage):
        super().__init__(f"missing {path} (produced by stage '{stage}')")
        self.path = path
        self.stage = stage


class Workspace:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.root = cfg.workdir
        os.makedirs(self.root, exist_ok=True)

    def path(self, name):
        return os.path.join(self.root, name)

    def require(self, name, override=""):
        p = override or self.path(name)
        if not os.path.exists(p):
            raise MissingArtifactError(p, PRODUCERS.get(name, "synth"))
        return p

    def frames(self):
        return scene_io.load_frames(self.require(FRAMES_DIR, self.cfg.frames), self.cfg.interval_s)

    def homography(self):
        p = self.cfg.homography or self.path(HOMOGRAPHY_FILE)
        return scene_io.load_homography(p) if os.path.exists(p) else scene_io.Homography.identity()

    def mask(self):
        p = self.cfg.mask or self.path(MASK_FILE)
        return scene_io.load_mask(p) if os.path.exists(p) else None

    def gt(self):
        return scene_io.read_trajectory_file(self.require(GT_FILE, self.cfg.gt))


def _seed_all(seed):
    import torch

    torch.manual_seed(seed)
    np.random.seed(seed % (2 ** 32))


def dpm_config(cfg: PipelineConfig):
    return dynamic_points.DPMConfig(
        k_points=cfg.k_points, sigma=cfg.sigma, beta=cfg.beta, lr=cfg.lr, resolution=cfg.resolution,
        softmax_temp=cfg.softmax_temp, width_mult=cfg.width_mult, use_forward=cfg.use_forward,
        use_backward=cfg.use_backward, use_consistency=cfg.use_consistency)


def aggregation_config(cfg: PipelineConfig):
    return aggregation.AggregationConfig(
        bandwidth=cfg.bandwidth, tau_h=cfg.tau_h, tau_f=cfg.tau_f, use_heatmaps=cfg.use_heatmaps,
        use_flow=cfg.use_flow, min_weight=cfg.min_weight, sigma=cfg.sigma)


# -- stages ------------------------------------------------------------------

def stage_synth(ws: Workspace):
    cfg = ws.cfg
    spec = scene_io.SyntheticSceneSpec(
        n_agents=cfg.synth_agents, speed_px=cfg.synth_speed, blob_radius_px=cfg.synth_radius,
        n_frames=cfg.synth_frames, width=cfg.synth_width, height=cfg.synth_height,
        background_seed=cfg.synth_background_seed, spawn_rate=cfg.synth_spawn,
        despawn_rate=cfg.synth_despawn, noise_sigma=cfg.synth_noise, layout=cfg.synth_layout)
    seq, gt, mask = scene_io.generate_synthetic_scene(spec, seed=cfg.seed)
    scene_io.save_frames(seq, ws.path(FRAMES_DIR))
    scene_io.write_trajectory_file(gt, ws.path(GT_FILE))
    scene_io.save_mask(mask, ws.path(MASK_FILE))
    scene_io.save_homography(scene_io.Homography.identity(), ws.path(HOMOGRAPHY_FILE))
    log.info("synth: %d frames, %d agents", len(seq), len(gt.agents()))


def stage_train_dpm(ws: Workspace):
    cfg = ws.cfg
    seq = ws.frames()
    _seed_all(cfg.seed)
    result = dynamic_points.train_dynamic_points(seq.frames, dpm_config(cfg), steps=cfg.dpm_steps,
                                                 batch_size=cfg.batch_size, seed=cfg.seed)
    dynamic_points.save_checkpoint(result.model, ws.path(DPM_FILE), result.history)
    with open(ws.path(DPM_LOSSES), "w") as fh:
        for step, h in enumerate(result.history):
            fh.write(f"{step} {h.total!r} {h.reconstruction!r} {h.consistency!r}\n")
    if result.history:
        log.info("train-dpm: loss %.5f -> %.5f", result.history[0].total, result.history[-1].total)


def stage_extract(ws: Workspace):
    seq = ws.frames()
    model, _ = dynamic_points.load_checkpoint(ws.require(DPM_FILE))
    pts = dynamic_points.infer_points(model, seq.frames)
    np.savez(ws.path(POINTS_FILE), points=pts, frame_ids=seq.frame_ids[1:],
             feature_size=model.config.feature_size, sigma=model.config.sigma)
    log.info("extract: %d frames x %d points", pts.shape[0], pts.shape[1])


def stage_aggregate(ws: Workspace):
    cfg = ws.cfg
    seq = ws.frames()
    points, feature_size = None, cfg.resolution // 8
    if cfg.use_heatmaps:
        blob = np.load(ws.require(POINTS_FILE))
        points, feature_size = blob["points"], int(blob["feature_size"])
    sets = aggregation.aggregate_video(seq.frames, points, ws.mask(), aggregation_config(cfg),
                                       feature_size=feature_size, frame_ids=seq.frame_ids)
    aggregation.write_instances(sets, ws.path(INSTANCES_FILE))
    log.info("aggregate: %d instance points over %d frames", sum(len(s) for s in sets), len(sets))


def _instance_sets(ws):
    seq_ids = None
    frames_dir = ws.cfg.frames or ws.path(FRAMES_DIR)
    if os.path.isdir(frames_dir):
        seq_ids = list(ws.frames().frame_ids[1:])
    return aggregation.read_instances(ws.require(INSTANCES_FILE), seq_ids)


def stage_match(ws: Workspace):
    cfg = ws.cfg
    sets = _instance_sets(ws)
    tracks = matching.assemble_tracks(sets, cfg.lambda_rgb, cfg.match_threshold)
    kept = matching.filter_tracks(tracks, cfg.min_track_len)
    px = matching.tracks_to_trajectory_file(kept)
    scene_io.write_trajectory_file(px, ws.path(TRACKS_PX_FILE))
    scene_io.write_trajectory_file(px.transformed(ws.homography()), ws.path(TRACKS_FILE))
    log.info("match: %d tracks, %d after length filter", len(tracks), len(kept))


def stage_train_pred(ws: Workspace):
    cfg = ws.cfg
    tracks = scene_io.read_trajectory_file(ws.require(TRACKS_FILE))
    windows = prediction.make_windows(tracks, cfg.t_obs, cfg.t_pred)
    model, history = prediction.train_predictor(windows, hidden=cfg.hidden, epochs=cfg.epochs,
                                                lr=cfg.lr_pred, seed=cfg.seed)
    prediction.save_predictor(model, ws.path(PREDICTOR_FILE), history)
    with open(ws.path(PREDICTOR_LOSSES), "w") as fh:
        for epoch, loss in enumerate(history):
            fh.write(f"{epoch} {loss!r}\n")
    log.info("train-pred: %d windows, loss %.5f -> %.5f", len(windows), history[0], history[-1])


def _test_trajectories(ws):
    p = ws.cfg.gt or ws.path(GT_FILE)
    if os.path.exists(p):
        return scene_io.read_trajectory_file(p)
    return scene_io.read_trajectory_file(ws.require(TRACKS_FILE))


def stage_predict(ws: Workspace):
    cfg = ws.cfg
    model, _ = prediction.load_predictor(ws.require(PREDICTOR_FILE))
    n = cfg.t_obs + cfg.t_pred
    windows = prediction.make_windows(_test_trajectories(ws), cfg.t_obs, cfg.t_pred)
    rows = []
    last = {}
    for w in windows:
        if w.start_frame < last.get(w.agent_id, -n) + n:
            continue  # non-overlapping windows keep (frame, agent) rows unique
        last[w.agent_id] = w.start_frame
        pred = prediction.predict(model, w.observed)
        for k, (x, y) in enumerate(pred):
            rows.append((w.start_frame + cfg.t_obs + k, w.agent_id, x, y))
    rows.sort(key=lambda r: (r[0], r[1]))
    scene_io.write_trajectory_file(scene_io.TrajectoryFile.from_rows(rows), ws.path(PREDICTIONS_FILE),
                                   suffix="pred")
    log.info("predict: %d rows", len(rows))


def stage_evaluate(ws: Workspace):
    cfg = ws.cfg
    tracks_path = ws.require(TRACKS_FILE)
    gt = ws.gt()
    h = ws.homography()
    metrics = {}

    sets = _instance_sets(ws)
    detected = {s.frame_id: (scene_io.pixel_to_world(h, s.points) if len(s) else s.points) for s in sets}
    ins = evaluation.instance_pr(detected, gt.per_frame(), cfg.ins_threshold, frames=sorted(detected))
    metrics["Ins-Precision"] = ins.precision
    metrics["Ins-Recall"] = ins.recall

    extracted = scene_io.read_trajectory_file(tracks_path)
    gen = evaluation.trajectory_pr(list(extracted.tracks().values()), list(gt.tracks().values()),
                                   cfg.gen_threshold)
    metrics["Gen-Precision"] = gen.precision
    metrics["Gen-Recall"] = gen.recall

    windows = prediction.make_windows(gt, cfg.t_obs, cfg.t_pred)
    if windows and os.path.exists(ws.path(PREDICTOR_FILE)):
        model, _ = prediction.load_predictor(ws.path(PREDICTOR_FILE))
        metrics["ADE"], metrics["FDE"] = prediction.evaluate_windows(model, windows)
        base = prediction.constant_position_baseline(np.stack([w.observed for w in windows]), cfg.t_pred)
        metrics["ADE-baseline"] = float(np.mean([evaluation.ade(b, w.target) for b, w in zip(base, windows)]))
    metrics["n_instance_frames"] = len(detected)
    metrics["n_tracks"] = len(extracted.agents())
    metrics["n_gt_tracks"] = len(gt.agents())

    with open(ws.path(REPORT_FILE), "w") as fh:
        fh.write(evaluation.format_report(metrics))
    with open(ws.path(REPORT_JSON), "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
    print(evaluation.format_report(metrics), end="")
    return metrics


STAGE_FUNCS = {
    "synth": stage_synth, "train-dpm": stage_train_dpm, "extract": stage_extract,
    "aggregate": stage_aggregate, "match": stage_match, "train-pred": stage_train_pred,
    "predict": stage_predict, "evaluate": stage_evaluate,
}


def run_stage(stage, cfg: PipelineConfig):
    cfg.validate()
    ws = Workspace(cfg)
    if stage == "pipeline":
        frames_dir = cfg.frames or ws.path(FRAMES_DIR)
        todo = STAGES if not os.path.isdir(frames_dir) else STAGES[1:]
        if not cfg.use_heatmaps:
            todo = [s for s in todo if s not in ("train-dpm", "extract")]
        for s in todo:
            STAGE_FUNCS[s](ws)
        return
    if stage not in STAGE_FUNCS:
        raise ConfigError(f"unknown stage {stage!r}")
    STAGE_FUNCS[stage](ws)


def build_parser():
    p = argparse.ArgumentParser(prog="dyntraj", description=__doc__.split("\n")[0])
    p.add_argument("stage", choices=STAGES + ["pipeline"])
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--workdir")
    for flag, key in [("--no-forward", "use_forward"), ("--no-backward", "use_backward"),
                      ("--no-consistency", "use_consistency"), ("--no-heatmaps", "use_heatmaps"),
                      ("--no-flow", "use_flow")]:
        p.add_argument(flag, dest=key, action="store_false", default=None)
    p.add_argument("--dump-config", action="store_true", help="print the effective config and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else PipelineConfig()
        overrides = {k: getattr(args, k) for k in ("seed", "workdir", "use_forward", "use_backward",
                                                    "use_consistency", "use_heatmaps", "use_flow")
                     if getattr(args, k) is not None}
        cfg = dataclasses.replace(cfg, **overrides)
        if args.dump_config:
            print(dump_config(cfg), end="")
            return 0
        run_stage(args.stage, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except dynamic_points.TrainingDivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (scene_io.SceneIOError, ValueError, prediction.PredictorTrainingError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
