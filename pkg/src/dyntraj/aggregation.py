"""Turn dynamic-point heatmaps and optical flow into per-frame instance points."""
from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np
import torch
import torch.nn.functional as F


@dataclass
class AggregationConfig:
    bandwidth: float = 8.0
    tau_h: float = 0.5
    tau_f: float = 0.5
    use_heatmaps: bool = True
    use_flow: bool = True
    min_weight: float = 0.0
    sigma: float = 0.1


@dataclass
class InstancePointSet:
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    rgb: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    frame_id: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.rgb = np.asarray(self.rgb, dtype=np.float64).reshape(-1, 3)
        if len(self.rgb) != len(self.points):
            raise ValueError("one rgb triple per point required")

    def __len__(self):
        return len(self.points)

    def subset(self, keep):
        return InstancePointSet(self.points[keep], self.rgb[keep], self.frame_id)


@dataclass
class Candidates:
    """Selected pixels; features are columns (x, y, heatmap max, flow u, flow v)."""

    features: np.ndarray

    @property
    def xy(self):
        return self.features[:, :2]

    @property
    def weights(self):
        return self.features[:, 2] + np.hypot(self.features[:, 3], self.features[:, 4])

    def __len__(self):
        return len(self.features)


# -- optical flow ------------------------------------------------------------

FARNEBACK_PARAMS = dict(pyr_scale=0.5, levels=3, winsize=5, iterations=5,
                        poly_n=5, poly_sigma=1.1, flags=0)
# OpenCV's Farneback reports spurious motion along the image border even for identical
# frames; solving on a mirror-padded canvas and cropping removes it.
FLOW_PAD = 16


def _gray(img):
    img = np.asarray(img)
    if img.ndim == 3:
        img = cv2.cvtColor(img.astype(np.float32), cv2.COLOR_RGB2GRAY)
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def compute_optical_flow(i_prev, i_curr, **params):
    """Dense Farneback flow (H, W, 2): where each pixel of `i_prev` moves to in `i_curr`."""
    if np.shape(i_prev)[:2] != np.shape(i_curr)[:2]:
        raise ValueError(f"frame sizes differ: {np.shape(i_prev)} vs {np.shape(i_curr)}")
    p = dict(FARNEBACK_PARAMS, **params)
    a, b = (cv2.copyMakeBorder(_gray(i), FLOW_PAD, FLOW_PAD, FLOW_PAD, FLOW_PAD, cv2.BORDER_REFLECT_101)
            for i in (i_prev, i_curr))
    flow = cv2.calcOpticalFlowFarneback(a, b, None, **p)[FLOW_PAD:-FLOW_PAD, FLOW_PAD:-FLOW_PAD]
    return np.nan_to_num(flow.astype(np.float64))


def flow_on_current_grid(i_prev, i_curr, **params):
    """Motion from t-1 to t sampled at the pixels of frame t (negated reverse flow)."""
    return -compute_optical_flow(i_curr, i_prev, **params)


# -- heatmaps ----------------------------------------------------------------

def upsample_heatmaps(h, height, width):
    """Bilinear (corner-aligned) upsampling of a (K, h, w) stack to (K, height, width)."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim == 2:
        h = h[None]
    if height < h.shape[1] or width < h.shape[2]:
        raise ValueError("upsample_heatmaps cannot downsample")
    t = torch.from_numpy(h)[None]
    out = F.interpolate(t, size=(height, width), mode="bilinear", align_corners=True)[0].numpy()
    return out


def select_candidate_pixels(heatmaps, flow, tau_h=0.5, tau_f=0.5) -> Candidates:
    """Pixels whose max heatmap exceeds tau_h or whose flow magnitude exceeds tau_f.

    Either source may be None (ablation); it then contributes nothing.
    """
    if heatmaps is None and flow is None:
        raise ValueError("need heatmaps or flow")
    shape = (heatmaps.shape[-2:] if heatmaps is not None else flow.shape[:2])
    hmax = np.zeros(shape) if heatmaps is None else np.asarray(heatmaps).reshape(-1, *shape).max(axis=0)
    uv = np.zeros(shape + (2,)) if flow is None else np.asarray(flow, dtype=np.float64)
    if uv.shape[:2] != hmax.shape:
        raise ValueError(f"heatmap {hmax.shape} and flow {uv.shape[:2]} grids differ")
    sel = (hmax > tau_h) | (np.hypot(uv[..., 0], uv[..., 1]) > tau_f)
    ys, xs = np.nonzero(sel)
    feats = np.column_stack([xs, ys, hmax[ys, xs], uv[ys, xs, 0], uv[ys, xs, 1]]).astype(np.float64)
    return Candidates(feats.reshape(-1, 5))


# -- mean shift --------------------------------------------------------------

def _window_means(data, weights, at, bandwidth, chunk=2048):
    """Weighted mean and mass of `data` inside a radius-`bandwidth` disc around each row of `at`."""
    means = np.empty_like(at)
    mass = np.empty(len(at))
    wd = np.column_stack([weights, weights * data[:, 0], weights * data[:, 1]])
    sq = (data ** 2).sum(axis=1)
    for s in range(0, len(at), chunk):
        a = at[s:s + chunk]
        d2 = (a ** 2).sum(axis=1)[:, None] - 2.0 * a @ data.T + sq[None, :]
        inside = (d2 <= bandwidth ** 2 + 1e-9).astype(np.float64)
        acc = inside @ wd
        mass[s:s + chunk] = acc[:, 0]
        with np.errstate(invalid="ignore", divide="ignore"):
            means[s:s + chunk] = acc[:, 1:] / acc[:, :1]
    empty = mass <= 0
    means[empty] = at[empty]
    return means, mass


def mean_shift(points, weights, bandwidth, max_iter=300, tol=None, max_seeds=3000):
    """Weighted flat-kernel mean shift. Returns (modes, masses) sorted by decreasing mass.

    Modes closer than bandwidth / 2 are merged, keeping the heavier one.
    """
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(points) == 0:
        return np.zeros((0, 2)), np.zeros(0)
    tol = 1e-4 * bandwidth if tol is None else tol
    seeds = np.unique(points, axis=0)
    if len(seeds) > max_seeds:
        step = bandwidth / 2
        seeds = np.unique(np.round(points / step), axis=0) * step
    modes = seeds.copy()
    active = np.ones(len(modes), dtype=bool)
    for _ in range(max_iter):
        if not active.any():
            break
        new, _ = _window_means(points, weights, modes[active], bandwidth)
        shift = np.hypot(*(new - modes[active]).T)
        modes[active] = new
        idx = np.flatnonzero(active)
        active[idx[shift < tol]] = False
    _, mass = _window_means(points, weights, modes, bandwidth)
    order = np.lexsort((modes[:, 1], modes[:, 0], -mass))
    kept = []
    for i in order:
        if mass[i] <= 0:
            continue
        if all(np.hypot(*(modes[i] - modes[j])) >= bandwidth / 2 for j in kept):
            kept.append(i)
    return modes[kept], mass[kept]


def sample_rgb(image, points):
    """Mean colour of the 3x3 patch around each point (clipped at the border)."""
    image = np.asarray(image)
    h, w = image.shape[:2]
    out = np.zeros((len(points), 3))
    for n, (x, y) in enumerate(np.asarray(points).reshape(-1, 2)):
        cx, cy = int(round(x)), int(round(y))
        patch = image[max(cy - 1, 0):min(cy + 2, h), max(cx - 1, 0):min(cx + 2, w)]
        out[n] = patch.reshape(-1, 3).mean(axis=0) if patch.size else 0.0
    return np.clip(out, 0.0, 1.0)


def mean_shift_cluster(candidates: Candidates, bandwidth, image=None, frame_id=0,
                       min_weight=0.0) -> InstancePointSet:
    modes, mass = mean_shift(candidates.xy, candidates.weights, bandwidth)
    modes = modes[mass >= min_weight] if len(modes) else modes
    if image is not None:
        h, w = np.shape(image)[:2]
        modes = np.clip(modes, 0, [w - 1, h - 1]) if len(modes) else modes
        rgb = sample_rgb(image, modes)
    else:
        rgb = np.zeros((len(modes), 3))
    return InstancePointSet(modes, rgb, frame_id)


def apply_validity_filter(ips: InstancePointSet, mask) -> InstancePointSet:
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    if len(ips) == 0:
        return ips
    px = np.round(ips.points).astype(np.int64)
    inside = (px[:, 0] >= 0) & (px[:, 0] < w) & (px[:, 1] >= 0) & (px[:, 1] < h)
    keep = np.zeros(len(ips), dtype=bool)
    keep[inside] = mask[px[inside, 1], px[inside, 0]]
    return ips.subset(keep)


# -- frame / video level -----------------------------------------------------

def aggregate_frame(i_prev, i_curr, heatmaps=None, mask=None, config: AggregationConfig | None = None,
                    frame_id=0) -> InstancePointSet:
    """Instance points of `i_curr`. `heatmaps` is a (K, h, w) stack at any resolution <= the frame's."""
    cfg = config or AggregationConfig()
    height, width = np.shape(i_curr)[:2]
    hm = None
    if cfg.use_heatmaps and heatmaps is not None:
        hm = upsample_heatmaps(heatmaps, height, width)
    flow = flow_on_current_grid(i_prev, i_curr) if cfg.use_flow else None
    if hm is None and flow is None:
        return InstancePointSet(frame_id=frame_id)
    cand = select_candidate_pixels(hm, flow, cfg.tau_h, cfg.tau_f)
    ips = mean_shift_cluster(cand, cfg.bandwidth, image=i_curr, frame_id=frame_id, min_weight=cfg.min_weight)
    if mask is not None:
        if np.shape(mask) != (height, width):
            raise ValueError(f"mask {np.shape(mask)} does not match frame {(height, width)}")
        ips = apply_validity_filter(ips, mask)
    return ips


def aggregate_video(frames, points=None, mask=None, config: AggregationConfig | None = None,
                    feature_size=16, frame_ids=None):
    """Instance points for frames 1..T-1. `points` is (T-1, K, 2) normalized dynamic points or None."""
    from .dynamic_points import points_to_heatmaps

    cfg = config or AggregationConfig()
    frames = np.asarray(frames)
    ids = np.arange(len(frames)) if frame_ids is None else np.asarray(frame_ids)
    out = []
    for t in range(1, len(frames)):
        hm = None
        if points is not None and cfg.use_heatmaps:
            hm = points_to_heatmaps(points[t - 1][None], feature_size, cfg.sigma)[0]
        out.append(aggregate_frame(frames[t - 1], frames[t], hm, mask, cfg, frame_id=int(ids[t])))
    return out


def write_instances(sets, path):
    with open(path, "w", encoding="utf-8") as fh:
        for s in sets:
            for (x, y), (r, g, b) in zip(s.points, s.rgb):
                fh.write(f"{s.frame_id} {float(x)!r} {float(y)!r} {float(r)!r} {float(g)!r} {float(b)!r}\n")


def read_instances(path, frame_ids=None):
    """Read `frame_id x y r g b` rows; frames listed in `frame_ids` but absent come back empty."""
    rows = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise ValueError(f"{path}:{line_no}: expected 6 columns")
            rows.setdefault(int(parts[0]), []).append([float(v) for v in parts[1:]])
    ids = sorted(set(rows) | set(frame_ids or []))
    out = []
    for fid in ids:
        arr = np.asarray(rows.get(fid, []), dtype=np.float64).reshape(-1, 5)
        out.append(InstancePointSet(arr[:, :2], arr[:, 2:], fid))
    return out
