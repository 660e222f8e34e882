"""Unsupervised dynamic-point discovery.

An extractor looks at a pair of consecutive frames and emits K points for the
second frame (spatial softmax followed by a soft-argmax). The points are drawn
as gaussian heatmaps and, together with features of a reference frame, decoded
back into the target frame. Training ties the forward pair (t-1 -> t) and the
backward pair (t+1 -> t) together with a location-wise MSE.

Coordinates are normalized to [-1, 1] with x along the width and y along the
height; grid cell i of an n-cell axis sits at -1 + 2 i / (n - 1).
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

log = logging.getLogger(__name__)

ENCODER_LAYERS = [64, 128, "M", 256, 256, "M", 512, 512, "M", 512, 512]
DECODER_LAYERS = [512, 512, "U", 256, 256, "U", 256, 256, "U", 128, 64]
CHECKPOINT_VERSION = 1


class TrainingDivergenceError(RuntimeError):
    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


@dataclass
class DPMConfig:
    k_points: int = 180
    sigma: float = 0.1
    beta: float = 0.5
    lr: float = 1e-4
    resolution: int = 128
    softmax_temp: float = 1.0
    width_mult: float = 1.0
    use_forward: bool = True
    use_backward: bool = True
    use_consistency: bool = True

    def __post_init__(self):
        if self.resolution % 8:
            raise ValueError("resolution must be divisible by 8")
        if self.sigma <= 0 or self.softmax_temp <= 0:
            raise ValueError("sigma and softmax_temp must be positive")
        if not (self.use_forward or self.use_backward):
            raise ValueError("at least one of the forward/backward extractors is required")

    @property
    def feature_size(self):
        return self.resolution // 8

    @property
    def consistency_active(self):
        return self.use_forward and self.use_backward and self.use_consistency


@dataclass
class LossBreakdown:
    total: float
    reconstruction: float
    consistency: float
    beta: float = 0.5

    def as_dict(self):
        return asdict(self)


# -- geometry ----------------------------------------------------------------

def normalized_grid(height, width, dtype=torch.float32, device=None):
    ys = torch.linspace(-1.0, 1.0, height, dtype=dtype, device=device)
    xs = torch.linspace(-1.0, 1.0, width, dtype=dtype, device=device)
    return ys, xs


def spatial_soft_argmax(act, temperature=1.0):
    """(B, K, H, W) activations -> (B, K, 2) expected (x, y) under a spatial softmax."""
    b, k, h, w = act.shape
    prob = F.softmax(act.reshape(b, k, h * w) / temperature, dim=-1).reshape(b, k, h, w)
    ys, xs = normalized_grid(h, w, act.dtype, act.device)
    x = (prob.sum(dim=2) * xs).sum(dim=-1)
    y = (prob.sum(dim=3) * ys).sum(dim=-1)
    return torch.stack([x, y], dim=-1)


def render_heatmaps(points, height, width, sigma):
    """(B, K, 2) points -> (B, K, H, W) maps exp(-|u - p|^2 / (2 sigma^2))."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    ys, xs = normalized_grid(height, width, points.dtype, points.device)
    dx = (xs[None, None, None, :] - points[..., 0, None, None]) ** 2
    dy = (ys[None, None, :, None] - points[..., 1, None, None]) ** 2
    return torch.exp(-(dx + dy) / (2 * sigma ** 2))


def consistency_loss(phi_f, phi_b):
    if phi_f.shape != phi_b.shape:
        raise ValueError(f"point sets differ in shape: {tuple(phi_f.shape)} vs {tuple(phi_b.shape)}")
    return ((phi_f - phi_b) ** 2).mean()


def reconstruction_loss(recon, target):
    if recon.shape != target.shape:
        raise ValueError(f"image shapes differ: {tuple(recon.shape)} vs {tuple(target.shape)}")
    return ((recon - target) ** 2).mean()


# -- networks ----------------------------------------------------------------

def _unit(cin, cout):
    return [nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.LeakyReLU(0.2, inplace=True)]


def make_layers(spec, in_channels, width_mult=1.0):
    layers = []
    c = in_channels
    for v in spec:
        if v == "M":
            layers.append(nn.MaxPool2d(2))
        elif v == "U":
            layers.append(nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False))
        else:
            out = max(1, int(round(v * width_mult)))
            layers += _unit(c, out)
            c = out
    return nn.Sequential(*layers), c


class DynamicPointModel(nn.Module):
    def __init__(self, config: DPMConfig | None = None):
        super().__init__()
        self.config = config or DPMConfig()
        cfg = self.config
        self.encoder, enc_out = make_layers(ENCODER_LAYERS, 3, cfg.width_mult)
        self.extractor, ext_out = make_layers(ENCODER_LAYERS, 6, cfg.width_mult)
        self.point_head = nn.Conv2d(ext_out, cfg.k_points, 1)
        self.decoder, dec_out = make_layers(DECODER_LAYERS, enc_out + cfg.k_points, cfg.width_mult)
        self.to_rgb = nn.Conv2d(dec_out, 3, 1)
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="leaky_relu")
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def _check_image(self, x):
        r = self.config.resolution
        if x.dim() != 4 or x.shape[1] != 3 or x.shape[2] != r or x.shape[3] != r:
            raise ValueError(f"expected (B, 3, {r}, {r}) images, got {tuple(x.shape)}")

    def encode_background(self, i1):
        self._check_image(i1)
        return self.encoder(i1 - 0.5)

    def activation_maps(self, frame_a, frame_b):
        self._check_image(frame_a)
        self._check_image(frame_b)
        x = torch.cat([frame_a, frame_b], dim=1) - 0.5
        return self.point_head(self.extractor(x))

    def extract(self, frame_a, frame_b):
        """Points of `frame_b`, seen from the pair (frame_a, frame_b)."""
        act = self.activation_maps(frame_a, frame_b)
        if not torch.isfinite(act).all():
            raise TrainingDivergenceError("non-finite extractor activations")
        return spatial_soft_argmax(act, self.config.softmax_temp)

    def heatmaps(self, points):
        s = self.config.feature_size
        return render_heatmaps(points, s, s, self.config.sigma)

    def decode(self, background, heatmaps):
        if background.shape[-2:] != heatmaps.shape[-2:] or background.shape[0] != heatmaps.shape[0]:
            raise ValueError(f"feature/heatmap mismatch: {tuple(background.shape)} vs {tuple(heatmaps.shape)}")
        return self.to_rgb(self.decoder(torch.cat([background, heatmaps], dim=1))) + 0.5

    def reconstruct(self, i1, points):
        return self.decode(self.encode_background(i1), self.heatmaps(points))

    def losses(self, i1, i_prev, i_t, i_next):
        """Forward pass on a batch of 4-frame tuples; returns (total, L_R, L_C, beta) tensors."""
        cfg = self.config
        if cfg.use_forward and cfg.use_backward:
            # one extractor call for both directions keeps batch statistics shared
            both = self.extract(torch.cat([i_prev, i_next]), torch.cat([i_t, i_t]))
            phi_f, phi_b = both.chunk(2)
        elif cfg.use_forward:
            phi_f = self.extract(i_prev, i_t)
            phi_b = None
        else:
            phi_f = None
            phi_b = self.extract(i_next, i_t)
        recon = self.reconstruct(i1, phi_f if phi_f is not None else phi_b)
        l_r = reconstruction_loss(recon, i_t)
        if phi_f is not None and phi_b is not None:
            l_c = consistency_loss(phi_f, phi_b)
        else:
            l_c = torch.zeros((), dtype=l_r.dtype)
        beta = cfg.beta if cfg.consistency_active else 0.0
        return l_r + beta * l_c, l_r, l_c, beta


# -- data --------------------------------------------------------------------

def to_tensor(frames):
    """(T, H, W, 3) float array -> (T, 3, H, W) float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.asarray(frames, dtype=np.float32).transpose(0, 3, 1, 2)))


def resize_frames(frames, resolution):
    frames = np.asarray(frames)
    if frames.shape[1] == resolution and frames.shape[2] == resolution:
        return frames
    import cv2
    return np.stack([cv2.resize(f.astype(np.float32), (resolution, resolution), interpolation=cv2.INTER_AREA)
                     for f in frames])


def sample_batch(video, batch_size, rng):
    """Draw (I1, I_{t-1}, I_t, I_{t+1}) tuples; I1 is the first frame of the video."""
    t_count = video.shape[0]
    if t_count < 4:
        raise ValueError("need at least 4 frames")
    ts = rng.integers(1, t_count - 1, size=batch_size)
    ts = torch.from_numpy(ts)
    i1 = video[:1].expand(batch_size, -1, -1, -1)
    return i1, video[ts - 1], video[ts], video[ts + 1]


def train_step(model, optimizer, batch, step=0) -> LossBreakdown:
    model.train()
    optimizer.zero_grad()
    total, l_r, l_c, beta = model.losses(*batch)
    if not torch.isfinite(total):
        raise TrainingDivergenceError("non-finite loss", step)
    total.backward()
    optimizer.step()
    return LossBreakdown(float(total.detach()), float(l_r.detach()), float(l_c.detach()), beta)


@dataclass
class TrainResult:
    model: DynamicPointModel
    history: list = field(default_factory=list)


def train_dynamic_points(frames, config: DPMConfig | None = None, steps=200, batch_size=8,
                         seed=0, log_every=50) -> TrainResult:
    """Train a fresh model on one video. `frames` is (T, H, W, 3) in [0, 1]."""
    config = config or DPMConfig()
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = DynamicPointModel(config)
    video = to_tensor(resize_frames(frames, config.resolution))
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    history = []
    for step in range(steps):
        losses = train_step(model, opt, sample_batch(video, batch_size, rng), step)
        history.append(losses)
        if log_every and step % log_every == 0:
            log.info("step %d total %.5f recon %.5f cons %.6f", step, losses.total,
                     losses.reconstruction, losses.consistency)
    return TrainResult(model, history)


@torch.no_grad()
def infer_points(model, frames, batch_size=16):
    """Points for frames 1..T-1 from the pairs (I_{t-1}, I_t); returns (T-1, K, 2) array."""
    model.eval()
    video = to_tensor(resize_frames(frames, model.config.resolution))
    out = []
    for s in range(1, len(video), batch_size):
        e = min(s + batch_size, len(video))
        out.append(model.extract(video[s - 1:e - 1], video[s:e]))
    if not out:
        return np.zeros((0, model.config.k_points, 2))
    return torch.cat(out).double().numpy()


def points_to_heatmaps(points, size, sigma):
    """numpy (N, K, 2) -> (N, K, size, size) heatmaps."""
    pts = torch.as_tensor(np.asarray(points), dtype=torch.float64)
    return render_heatmaps(pts, size, size, sigma).numpy()


def save_checkpoint(model, path, history=None):
    torch.save({
        "format": "dyntraj-dpm",
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "state_dict": model.state_dict(),
        "history": [h.as_dict() for h in (history or [])],
    }, path)


def load_checkpoint(path):
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != "dyntraj-dpm" or blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} dynamic-point checkpoint")
    model = DynamicPointModel(DPMConfig(**blob["config"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    history = [LossBreakdown(**h) for h in blob.get("history", [])]
    return model, history


def count_parameters(model):
    return sum(math.prod(p.shape) for p in model.parameters())
