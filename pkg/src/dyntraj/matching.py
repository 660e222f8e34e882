"""Cross-frame instance matching and track assembly."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .aggregation import InstancePointSet

DEFAULT_LAMBDA = 0.2
DEFAULT_MIN_TRACK_LEN = 20


def build_cost_matrix(p: InstancePointSet, q: InstancePointSet, lam=DEFAULT_LAMBDA):
    """c[i, j] = |pos_i - pos_j|_2 + lam * |rgb_i - rgb_j|_1."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    dist = np.linalg.norm(p.points[:, None, :] - q.points[None, :, :], axis=-1)
    rgb = np.abs(p.rgb[:, None, :] - q.rgb[None, :, :]).sum(axis=-1)
    return (dist + lam * rgb).reshape(len(p), len(q))


def _hungarian_square(c):
    """Minimum-cost perfect matching on a square matrix; returns col index per row.

    Shortest augmenting paths with row/column potentials, O(n^3). Rows are
    inserted in index order and the first minimal column wins ties.
    """
    n = c.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j]: row (1-based) matched to column j; column 0 is virtual
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = c[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=np.int64)
    col_of_row[p[1:] - 1] = np.arange(n)
    return col_of_row


def km_assign(c):
    """Minimum-total-cost assignment of size min(M, N) as a list of (row, col) pairs."""
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError("cost matrix must be 2-D")
    m, n = c.shape
    if m == 0 or n == 0:
        return []
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix has non-finite entries")
    size = max(m, n)
    pad = c.max() + 1.0
    sq = np.full((size, size), pad)
    sq[:m, :n] = c
    cols = _hungarian_square(sq)
    return [(i, int(cols[i])) for i in range(m) if cols[i] < n]


def classify_pairs(assignment, c, threshold):
    """Split pairs into (true, false) by the strict test c[i, j] < threshold."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    true, false = [], []
    for i, j in assignment:
        (true if c[i][j] < threshold else false).append((i, j))
    return true, false


@dataclass
class Track:
    agent_id: int
    start_frame: int
    positions: list = field(default_factory=list)
    rgbs: list = field(default_factory=list)

    def __len__(self):
        return len(self.positions)

    @property
    def end_frame(self):
        return self.start_frame + len(self.positions) - 1

    def as_array(self):
        return np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)


def match_frames(p: InstancePointSet, q: InstancePointSet, lam, threshold):
    """True pairs between two consecutive frames as a dict row -> col."""
    c = build_cost_matrix(p, q, lam)
    true, _ = classify_pairs(km_assign(c), c, threshold)
    return dict(true)


def assemble_tracks(frames, lam=DEFAULT_LAMBDA, threshold=6.0):
    """Chain per-frame instance points (temporal order) into gap-free tracks.

    A point not continuing a track starts one only if it has a true pair into the
    next frame; otherwise it is dropped as an outlier.
    """
    frames = list(frames)
    if not frames:
        return []
    links = [match_frames(frames[t], frames[t + 1], lam, threshold) for t in range(len(frames) - 1)]
    tracks = []
    active = {}  # point index in current frame -> Track
    next_id = 0
    for t, ips in enumerate(frames):
        if t > 0:
            fid_prev, fid = frames[t - 1].frame_id, ips.frame_id
            if fid != fid_prev + 1:
                raise ValueError(f"frames must be consecutive: {fid_prev} -> {fid}")
        forward = links[t] if t < len(links) else {}
        current = {}
        for i, track in active.items():
            j = links[t - 1][i]
            track.positions.append(ips.points[j].copy())
            track.rgbs.append(ips.rgb[j].copy())
            current[j] = track
        for j in range(len(ips)):
            if j in current or j not in forward:
                continue
            track = Track(next_id, ips.frame_id, [ips.points[j].copy()], [ips.rgb[j].copy()])
            next_id += 1
            tracks.append(track)
            current[j] = track
        active = {j: tr for j, tr in current.items() if j in forward}
    return tracks


def filter_tracks(tracks, min_len=DEFAULT_MIN_TRACK_LEN):
    if min_len < 1:
        raise ValueError("min_len must be >= 1")
    return [t for t in tracks if len(t) >= min_len]


def tracks_to_trajectory_file(tracks):
    from .scene_io import TrajectoryFile

    return TrajectoryFile.from_tracks({t.agent_id: (t.start_frame, t.as_array()) for t in tracks})


def trajectory_file_to_tracks(traj):
    out = []
    for aid, (fids, xy) in traj.tracks().items():
        out.append(Track(aid, int(fids[0]), list(xy)))
    return out
