"""Observe-8 / predict-12 recurrent trajectory predictor.

The network only ever sees per-step displacements and emits displacements;
absolute positions are rebuilt from the last observed point in float64. This
makes predictions exactly translation-equivariant for inputs whose
displacements are computed without rounding.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

log = logging.getLogger(__name__)

T_OBS = 8
T_PRED = 12
CHECKPOINT_VERSION = 1


class PredictorTrainingError(RuntimeError):
    pass


@dataclass
class PredictionWindow:
    observed: np.ndarray
    target: np.ndarray
    agent_id: int = 0
    start_frame: int = 0


def _contiguous_runs(frame_ids):
    frame_ids = np.asarray(frame_ids)
    breaks = np.flatnonzero(np.diff(frame_ids) != 1) + 1
    return np.split(np.arange(len(frame_ids)), breaks)


def make_windows(tracks, t_obs=T_OBS, t_pred=T_PRED):
    """Stride-1 windows over every contiguous stretch of every track.

    `tracks` is a TrajectoryFile or a mapping agent_id -> (frame_ids, (L, 2) xy).
    """
    if hasattr(tracks, "tracks"):
        tracks = tracks.tracks()
    n = t_obs + t_pred
    out = []
    for aid, (fids, xy) in sorted(tracks.items()):
        xy = np.asarray(xy, dtype=np.float64)
        for run in _contiguous_runs(fids):
            for s in range(len(run) - n + 1):
                idx = run[s:s + n]
                out.append(PredictionWindow(xy[idx[:t_obs]].copy(), xy[idx[t_obs:]].copy(),
                                            int(aid), int(fids[idx[0]])))
    return out


class TrajectoryPredictor(nn.Module):
    def __init__(self, hidden=64, t_obs=T_OBS, t_pred=T_PRED, embed=32, scale=1.0):
        super().__init__()
        self.hidden = hidden
        self.t_obs = t_obs
        self.t_pred = t_pred
        self.embed_dim = embed
        self.register_buffer("scale", torch.tensor(float(scale)))
        self.embed = nn.Linear(2, embed)
        self.encoder = nn.LSTMCell(embed, hidden)
        self.decoder = nn.LSTMCell(embed, hidden)
        self.out = nn.Linear(hidden, 2)

    def forward(self, offsets):
        """(B, t_obs - 1, 2) observed displacements -> (B, t_pred, 2) future displacements."""
        x = offsets / self.scale
        b = x.shape[0]
        h = x.new_zeros(b, self.hidden)
        c = x.new_zeros(b, self.hidden)
        for k in range(x.shape[1]):
            h, c = self.encoder(torch.relu(self.embed(x[:, k])), (h, c))
        step = x[:, -1]
        preds = []
        for _ in range(self.t_pred):
            h, c = self.decoder(torch.relu(self.embed(step)), (h, c))
            step = self.out(h) + step
            preds.append(step)
        return torch.stack(preds, dim=1) * self.scale

    def config(self):
        return dict(hidden=self.hidden, t_obs=self.t_obs, t_pred=self.t_pred,
                    embed=self.embed_dim, scale=float(self.scale))


def _observed_offsets(observed):
    return np.diff(np.asarray(observed, dtype=np.float64), axis=-2)


def _stack(windows):
    obs = np.stack([w.observed for w in windows])
    tgt = np.stack([w.target for w in windows])
    offsets = torch.from_numpy(_observed_offsets(obs).astype(np.float32))
    rel = torch.from_numpy((tgt - obs[:, -1:, :]).astype(np.float32))
    return offsets, rel


def window_loss(model, offsets, rel_target):
    """MSE between predicted and true positions (relative to the last observation)."""
    return ((torch.cumsum(model(offsets), dim=1) - rel_target) ** 2).mean()


def train_predictor(windows, hidden=64, epochs=50, lr=1e-3, batch_size=64, seed=0, model=None):
    """Returns (model, per-epoch mean training loss)."""
    windows = list(windows)
    if not windows:
        raise PredictorTrainingError("no training windows")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    offsets, rel = _stack(windows)
    if model is None:
        scale = float(offsets.abs().mean()) or 1.0
        model = TrajectoryPredictor(hidden=hidden, t_obs=offsets.shape[1] + 1, t_pred=rel.shape[1], scale=scale)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    history = []
    for epoch in range(epochs):
        model.train()
        order = torch.from_numpy(rng.permutation(len(windows)))
        total = 0.0
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            opt.zero_grad()
            loss = window_loss(model, offsets[idx], rel[idx])
            if not torch.isfinite(loss):
                raise PredictorTrainingError(f"non-finite loss at epoch {epoch}")
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        history.append(total / len(windows))
        log.debug("epoch %d loss %.6f", epoch, history[-1])
    model.eval()
    return model, history


@torch.no_grad()
def predict(model, observed):
    """(t_obs, 2) or (B, t_obs, 2) observed positions -> matching (t_pred, 2) float64 predictions."""
    obs = np.asarray(observed, dtype=np.float64)
    single = obs.ndim == 2
    if single:
        obs = obs[None]
    if obs.shape[1:] != (model.t_obs, 2):
        raise ValueError(f"expected observed shape ({model.t_obs}, 2), got {obs.shape[1:]}")
    model.eval()
    steps = model(torch.from_numpy(_observed_offsets(obs).astype(np.float32))).numpy().astype(np.float64)
    pred = obs[:, -1:, :] + np.cumsum(steps, axis=1)
    return pred[0] if single else pred


def constant_position_baseline(observed, t_pred=T_PRED):
    obs = np.asarray(observed, dtype=np.float64)
    return np.repeat(obs[..., -1:, :], t_pred, axis=-2)


def evaluate_windows(model, windows):
    """Mean ADE and FDE over windows."""
    from .evaluation import ade, fde

    if not windows:
        return float("nan"), float("nan")
    preds = predict(model, np.stack([w.observed for w in windows]))
    a = [ade(p, w.target) for p, w in zip(preds, windows)]
    f = [fde(p, w.target) for p, w in zip(preds, windows)]
    return float(np.mean(a)), float(np.mean(f))


def save_predictor(model, path, history=None):
    torch.save({"format": "dyntraj-predictor", "version": CHECKPOINT_VERSION,
                "config": model.config(), "state_dict": model.state_dict(),
                "history": list(history or [])}, path)


def load_predictor(path):
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != "dyntraj-predictor" or blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} predictor checkpoint")
    model = TrajectoryPredictor(**blob["config"])
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob.get("history", [])
