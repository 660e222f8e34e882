"""Frames, homographies, validity masks, trajectory files and synthetic scenes."""
from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from typing import Optional, Sequence

import cv2
import numpy as np

DEFAULT_INTERVAL_S = 0.4
_IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp")


class SceneIOError(Exception):
    """Base class for input/output failures."""


class LoadError(SceneIOError):
    pass


class TrajectoryParseError(SceneIOError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class DegenerateProjectionError(SceneIOError):
    pass


class SceneSpecError(SceneIOError):
    pass


@dataclass
class FrameSequence:
    frames: np.ndarray  # (T, H, W, 3) float in [0, 1]
    interval_s: float = DEFAULT_INTERVAL_S
    frame_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ValueError(f"frames must be (T, H, W, 3), got {self.frames.shape}")
        if self.interval_s <= 0:
            raise ValueError("interval_s must be positive")
        if self.frame_ids is None:
            self.frame_ids = np.arange(len(self.frames), dtype=np.int64)
        self.frame_ids = np.asarray(self.frame_ids, dtype=np.int64)
        if len(self.frame_ids) != len(self.frames):
            raise ValueError("one frame id per frame required")
        if np.any(np.diff(self.frame_ids) <= 0):
            raise ValueError("frame_ids must be strictly increasing")

    def __len__(self):
        return len(self.frames)

    @property
    def shape(self):
        return self.frames.shape[1:3]


def _frame_key(name):
    digits = re.findall(r"\d+", os.path.splitext(name)[0])
    return (int(digits[-1]) if digits else -1, name)


def load_frames(path, interval_s=DEFAULT_INTERVAL_S) -> FrameSequence:
    """Load a directory of numbered images, sorted by the number in the filename."""
    if interval_s <= 0:
        raise LoadError("interval_s must be positive")
    if not os.path.isdir(path):
        raise LoadError(f"{path}: not a directory")
    names = [n for n in os.listdir(path) if n.lower().endswith(_IMAGE_EXTS)]
    if not names:
        raise LoadError(f"{path}: no frames")
    names.sort(key=_frame_key)

    frames = []
    ids = []
    for name in names:
        img = cv2.imread(os.path.join(path, name), cv2.IMREAD_COLOR)
        if img is None:
            raise LoadError(f"{name}: unreadable image")
        if frames and img.shape != frames[0].shape:
            raise LoadError(
                f"{name}: size {img.shape[1]}x{img.shape[0]} differs from "
                f"{frames[0].shape[1]}x{frames[0].shape[0]}")
        frames.append(img)
        ids.append(_frame_key(name)[0])
    data = np.stack([cv2.cvtColor(f, cv2.COLOR_BGR2RGB) for f in frames]).astype(np.float64) / 255.0
    ids = np.asarray(ids)
    if len(np.unique(ids)) != len(ids) or np.any(ids < 0):
        ids = np.arange(len(frames))
    return FrameSequence(data, interval_s, ids)


def save_frames(seq: FrameSequence, path):
    os.makedirs(path, exist_ok=True)
    for fid, frame in zip(seq.frame_ids, seq.frames):
        img = np.clip(np.round(frame * 255.0), 0, 255).astype(np.uint8)
        cv2.imwrite(os.path.join(path, f"{fid:06d}.png"), cv2.cvtColor(img, cv2.COLOR_RGB2BGR))


# -- homography -------------------------------------------------------------

class Homography:
    """3x3 projective map from pixel to world coordinates."""

    def __init__(self, m):
        m = np.asarray(m, dtype=np.float64).reshape(3, 3)
        if abs(np.linalg.det(m)) <= 1e-12:
            raise ValueError("homography is singular")
        self.m = m

    @classmethod
    def identity(cls):
        return cls(np.eye(3))

    def inverse(self):
        return Homography(np.linalg.inv(self.m))

    def __repr__(self):
        return f"Homography({self.m.tolist()})"


def _project(m, pts):
    pts = np.asarray(pts, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    homo = np.column_stack([pts, np.ones(len(pts))]) @ m.T
    w = homo[:, 2]
    if np.any(np.abs(w) < 1e-12):
        raise DegenerateProjectionError("point maps to infinity (|w| < 1e-12)")
    out = homo[:, :2] / w[:, None]
    return out[0] if single else out


def pixel_to_world(h: Homography, p):
    """Map pixel point(s) (u, v) to world coordinates; accepts (2,) or (N, 2)."""
    return _project(h.m, p)


def world_to_pixel(h: Homography, p):
    return _project(np.linalg.inv(h.m), p)


def load_homography(path) -> Homography:
    with open(path) as fh:
        values = [float(v) for v in fh.read().split()]
    if len(values) != 9:
        raise LoadError(f"{path}: expected 9 numbers, found {len(values)}")
    return Homography(values)


def save_homography(h: Homography, path):
    with open(path, "w") as fh:
        for row in h.m:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


# -- validity mask -----------------------------------------------------------

def load_mask(path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if img is None:
        raise LoadError(f"{path}: unreadable mask")
    return img > 0


def save_mask(mask, path):
    cv2.imwrite(str(path), np.where(np.asarray(mask, bool), 255, 0).astype(np.uint8))


# -- trajectory files --------------------------------------------------------

@dataclass
class TrajectoryFile:
    """Rows of (frame_id, agent_id, x, y)."""

    frame_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    agent_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    xy: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __post_init__(self):
        self.frame_ids = np.asarray(self.frame_ids, dtype=np.int64).reshape(-1)
        self.agent_ids = np.asarray(self.agent_ids, dtype=np.int64).reshape(-1)
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        if not (len(self.frame_ids) == len(self.agent_ids) == len(self.xy)):
            raise ValueError("column lengths differ")

    @classmethod
    def from_rows(cls, rows):
        rows = list(rows)
        if not rows:
            return cls()
        f, a, x, y = zip(*rows)
        return cls(np.array(f), np.array(a), np.column_stack([x, y]))

    @classmethod
    def from_tracks(cls, tracks):
        """Build from a mapping agent_id -> (start_frame, (L, 2) positions)."""
        rows = []
        for aid, (start, pos) in tracks.items():
            for k, (x, y) in enumerate(np.asarray(pos, dtype=np.float64)):
                rows.append((start + k, aid, x, y))
        rows.sort(key=lambda r: (r[0], r[1]))
        return cls.from_rows(rows)

    def __len__(self):
        return len(self.frame_ids)

    def __eq__(self, other):
        if not isinstance(other, TrajectoryFile):
            return NotImplemented
        return (np.array_equal(self.frame_ids, other.frame_ids)
                and np.array_equal(self.agent_ids, other.agent_ids)
                and np.array_equal(self.xy, other.xy))

    def rows(self):
        for f, a, (x, y) in zip(self.frame_ids, self.agent_ids, self.xy):
            yield int(f), int(a), float(x), float(y)

    def agents(self):
        return sorted(set(self.agent_ids.tolist()))

    def tracks(self):
        """agent_id -> (frame_ids, (L, 2) positions), sorted by frame."""
        out = {}
        for aid in self.agents():
            sel = self.agent_ids == aid
            order = np.argsort(self.frame_ids[sel], kind="stable")
            out[aid] = (self.frame_ids[sel][order], self.xy[sel][order])
        return out

    def per_frame(self):
        """frame_id -> (N, 2) positions."""
        out = {}
        for fid in np.unique(self.frame_ids):
            out[int(fid)] = self.xy[self.frame_ids == fid]
        return out

    def validate(self):
        pairs = set(zip(self.frame_ids.tolist(), self.agent_ids.tolist()))
        if len(pairs) != len(self):
            raise ValueError("duplicate (frame_id, agent_id) rows")
        for aid, (fids, _) in self.tracks().items():
            if np.any(np.diff(fids) != 1):
                raise ValueError(f"agent {aid}: frame ids are not consecutive")

    def transformed(self, h: Homography):
        if len(self) == 0:
            return TrajectoryFile()
        return TrajectoryFile(self.frame_ids, self.agent_ids, pixel_to_world(h, self.xy))


def write_trajectory_file(t: TrajectoryFile, path, suffix=None):
    """Write `frame_id agent_id x y` rows; `suffix` appends a flag column (e.g. "pred")."""
    tail = f" {suffix}" if suffix else ""
    with open(path, "w", encoding="utf-8") as fh:
        for f, a, x, y in t.rows():
            fh.write(f"{f} {a} {x!r} {y!r}{tail}\n")


def read_trajectory_file(path, strict=True) -> TrajectoryFile:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) == 5 and not _is_number(parts[4]):
                parts = parts[:4]
            if len(parts) != 4:
                raise TrajectoryParseError(path, line_no, f"expected 4 columns, found {len(parts)}")
            try:
                f, a = int(float(parts[0])), int(float(parts[1]))
                x, y = float(parts[2]), float(parts[3])
            except ValueError as exc:
                raise TrajectoryParseError(path, line_no, str(exc)) from None
            rows.append((f, a, x, y))
    traj = TrajectoryFile.from_rows(rows)
    if strict:
        try:
            traj.validate()
        except ValueError as exc:
            raise TrajectoryParseError(path, 0, str(exc)) from None
    return traj


def _is_number(s):
    try:
        float(s)
    except ValueError:
        return False
    return True


# -- synthetic scenes --------------------------------------------------------

@dataclass
class SyntheticSceneSpec:
    n_agents: int = 2
    speed_px: float = 2.0
    blob_radius_px: int = 4
    n_frames: int = 100
    width: int = 128
    height: int = 128
    background_seed: int = 0
    spawn_rate: float = 0.0    # probability of one new agent per frame
    despawn_rate: float = 0.0  # per-agent probability of leaving per frame
    noise_sigma: float = 0.0   # per-frame positional jitter, pixels
    layout: str = "random"     # "random" or "lanes"
    starts: Optional[Sequence[Sequence[float]]] = None
    velocities: Optional[Sequence[Sequence[float]]] = None

    def validate(self):
        if self.n_agents < 0:
            raise SceneSpecError("n_agents must be >= 0")
        if self.n_frames < 4:
            raise SceneSpecError("n_frames must be >= 4")
        if self.blob_radius_px <= 0 or self.blob_radius_px >= min(self.width, self.height) / 2:
            raise SceneSpecError("blob_radius_px must be in (0, min(H, W)/2)")
        if self.layout not in ("random", "lanes"):
            raise SceneSpecError(f"unknown layout {self.layout!r}")
        for name in ("starts", "velocities"):
            v = getattr(self, name)
            if v is not None and len(v) != self.n_agents:
                raise SceneSpecError(f"{name} must have one entry per agent")


def blob_sigma(radius):
    return radius / 2.0


def render_background(width, height, seed):
    """Smooth low-contrast texture in roughly [0.25, 0.6]."""
    rng = np.random.default_rng(seed)
    noise = rng.random((height, width, 3)).astype(np.float32)
    tex = cv2.GaussianBlur(noise, (0, 0), sigmaX=2.0)
    tex = (tex - tex.min()) / max(tex.max() - tex.min(), 1e-9)
    base = np.array([0.35, 0.4, 0.38])
    return np.clip(base + 0.25 * (tex - 0.5), 0.0, 1.0).astype(np.float64)


def blob_alpha(width, height, center, radius):
    """Gaussian opacity map of a blob; its maximum is at the pixel nearest `center`."""
    s = blob_sigma(radius)
    xs = np.arange(width)[None, :]
    ys = np.arange(height)[:, None]
    d2 = (xs - center[0]) ** 2 + (ys - center[1]) ** 2
    return np.exp(-d2 / (2 * s * s))


def _initial_state(spec, rng, idx):
    margin = 2 * spec.blob_radius_px
    w, h = spec.width, spec.height
    if spec.starts is not None and idx < len(spec.starts):
        pos = np.array(spec.starts[idx], dtype=np.float64)
        vel = np.array(spec.velocities[idx] if spec.velocities is not None else (spec.speed_px, 0.0),
                       dtype=np.float64)
        return pos, vel
    if spec.layout == "lanes":
        n_lanes = max(spec.n_agents, 1)
        lane = idx % n_lanes
        y = margin + (lane + 0.5) * (h - 2 * margin) / n_lanes
        x = rng.uniform(margin, w - margin)
        sign = 1.0 if lane % 2 == 0 else -1.0
        return np.array([x, y]), np.array([sign * spec.speed_px, 0.0])
    pos = rng.uniform([margin, margin], [w - margin, h - margin])
    angle = rng.uniform(0, 2 * np.pi)
    return pos, spec.speed_px * np.array([np.cos(angle), np.sin(angle)])


def _reflect(pos, vel, lo, hi):
    for d in range(2):
        if pos[d] < lo[d]:
            pos[d] = 2 * lo[d] - pos[d]
            vel[d] = -vel[d]
        elif pos[d] > hi[d]:
            pos[d] = 2 * hi[d] - pos[d]
            vel[d] = -vel[d]
    return pos, vel


def generate_synthetic_scene(spec: SyntheticSceneSpec, seed=0):
    """Render moving gaussian blobs over a static texture.

    Returns (FrameSequence, TrajectoryFile, validity mask). Ground-truth rows are
    the exact rendered blob centres in pixels (world == pixel under the identity
    homography).
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    w, h = spec.width, spec.height
    bg = render_background(w, h, spec.background_seed)
    margin = 2 * spec.blob_radius_px
    lo = np.array([margin, margin], dtype=np.float64)
    hi = np.array([w - 1 - margin, h - 1 - margin], dtype=np.float64)

    agents = {}  # id -> [pos, vel, color]
    next_id = 0
    for i in range(spec.n_agents):
        pos, vel = _initial_state(spec, rng, i)
        color = _agent_color(rng)
        agents[next_id] = [pos, vel, color]
        next_id += 1

    frames = np.empty((spec.n_frames, h, w, 3))
    rows = []
    for t in range(spec.n_frames):
        if t > 0:
            for aid in list(agents):
                if spec.despawn_rate > 0 and rng.random() < spec.despawn_rate:
                    del agents[aid]
                    continue
                pos, vel, _ = agents[aid]
                pos, vel = _reflect(pos + vel, vel.copy(), lo, hi)
                agents[aid][0], agents[aid][1] = pos, vel
            if spec.spawn_rate > 0 and rng.random() < spec.spawn_rate:
                pos, vel = _initial_state(spec, rng, next_id)
                agents[next_id] = [pos, vel, _agent_color(rng)]
                next_id += 1
        img = bg.copy()
        for aid in sorted(agents):
            pos, _, color = agents[aid]
            center = pos
            if spec.noise_sigma > 0:
                center = np.clip(pos + rng.normal(0, spec.noise_sigma, 2), lo, hi)
            a = blob_alpha(w, h, center, spec.blob_radius_px)[..., None]
            img = img * (1 - a) + color * a
            rows.append((t, aid, float(center[0]), float(center[1])))
        frames[t] = img

    mask = np.ones((h, w), dtype=bool)
    return FrameSequence(frames), TrajectoryFile.from_rows(rows), mask


def _agent_color(rng):
    # strong luminance contrast against the mid-grey background (flow runs on grayscale)
    palette = np.array([[0.98, 0.95, 0.2], [0.05, 0.05, 0.05], [0.2, 0.95, 0.95],
                        [0.55, 0.02, 0.02], [0.97, 0.97, 0.97], [0.05, 0.05, 0.5]])
    return palette[rng.integers(len(palette))]
