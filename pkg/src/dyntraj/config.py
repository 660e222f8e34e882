"""Pipeline configuration: `key = value` text files with typed, validated keys."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    seed: int | None = None
    workdir: str = "run"
    frames: str = ""
    homography: str = ""
    mask: str = ""
    gt: str = ""
    interval_s: float = 0.4

    # dynamic-point model
    k_points: int = 180
    sigma: float = 0.1
    beta: float = 0.5
    lr: float = 1e-4
    resolution: int = 128
    softmax_temp: float = 1.0
    width_mult: float = 1.0
    dpm_steps: int = 2000
    batch_size: int = 8
    use_forward: bool = True
    use_backward: bool = True
    use_consistency: bool = True

    # aggregation
    bandwidth: float = 8.0
    tau_h: float = 0.5
    tau_f: float = 0.5
    use_heatmaps: bool = True
    use_flow: bool = True
    min_weight: float = 0.0

    # matching
    lambda_rgb: float = 0.2
    match_threshold: float = 6.0
    min_track_len: int = 20

    # prediction
    t_obs: int = 8
    t_pred: int = 12
    hidden: int = 64
    epochs: int = 50
    lr_pred: float = 1e-3

    # evaluation
    ins_threshold: float = 1.5
    gen_threshold: float = 1.5

    # synthetic scene
    synth_agents: int = 2
    synth_frames: int = 200
    synth_width: int = 128
    synth_height: int = 128
    synth_speed: float = 2.0
    synth_radius: int = 4
    synth_layout: str = "random"
    synth_noise: float = 0.0
    synth_spawn: float = 0.0
    synth_despawn: float = 0.0
    synth_background_seed: int = 0

    def validate(self):
        if self.seed is None:
            raise ConfigError("seed is required (config key `seed` or --seed)")
        positive = ["interval_s", "sigma", "lr", "softmax_temp", "width_mult", "bandwidth",
                    "match_threshold", "lr_pred", "ins_threshold", "gen_threshold"]
        bad = [k for k in positive if getattr(self, k) <= 0]
        if bad:
            raise ConfigError(f"must be positive: {', '.join(bad)}")
        if self.resolution % 8:
            raise ConfigError("resolution must be divisible by 8")
        if self.min_track_len < 1 or self.t_obs < 2 or self.t_pred < 1:
            raise ConfigError("min_track_len >= 1, t_obs >= 2 and t_pred >= 1 required")
        if not (self.use_forward or self.use_backward):
            raise ConfigError("use_forward and use_backward cannot both be false")
        return self


# file keys that differ from the attribute name
_ALIASES = {"lambda": "lambda_rgb"}


def _parse_value(raw, typ, key):
    raw = raw.strip()
    typ = str(typ)
    try:
        if "bool" in typ:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if "int" in typ:
            if raw.lower() in ("none", ""):
                return None
            return int(raw)
        if "float" in typ:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ}") from None
    return raw.strip('"').strip("'")


def parse_config(text, base: PipelineConfig | None = None) -> PipelineConfig:
    known = {f.name: f.type for f in fields(PipelineConfig)}
    values = {}
    unknown = []
    for line_no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected `key = value`")
        key, raw = (s.strip() for s in line.split("=", 1))
        name = _ALIASES.get(key, key)
        if name not in known:
            unknown.append(key)
            continue
        values[name] = _parse_value(raw, known[name], key)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return dataclasses.replace(base or PipelineConfig(), **values)


def load_config(path, base: PipelineConfig | None = None) -> PipelineConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), base)


def dump_config(cfg: PipelineConfig) -> str:
    out = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        key = "lambda" if f.name == "lambda_rgb" else f.name
        out.append(f"{key} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(out) + "\n"
