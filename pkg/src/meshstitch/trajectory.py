"""Trajectory algebra: camera paths, stitching motions, overlap masks."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid_warp import ControlGrid, GridShape, inside_extent, tps_eval, tps_fit
from .motion_types import MotionField


@dataclass(frozen=True)
class Trajectory:
    """Cumulative per-control-point 2D paths; positions[0] is all zeros."""

    shape: GridShape
    positions: np.ndarray  # (N_t, U+1, V+1, 2)

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 4 or pos.shape[1:] != self.shape.point_dims + (2,):
            raise ValueError("positions must be (N_t, U+1, V+1, 2)")
        if pos.shape[0] < 1:
            raise ValueError("trajectory needs at least one frame")
        if np.abs(pos[0]).max() > 0:
            raise ValueError("trajectory must start at zero")
        object.__setattr__(self, "positions", pos)

    @property
    def n_frames(self) -> int:
        return self.positions.shape[0]

    def window(self, start: int, length: int) -> np.ndarray:
        """Positions slice [start, start+length) as a plain array."""
        if start < 0 or start + length > self.n_frames:
            raise IndexError("window out of range")
        return self.positions[start:start + length]


@dataclass(frozen=True)
class OverlapMask:
    """Per-control-point overlap flags for one frame."""

    shape: GridShape
    flags: np.ndarray  # (U+1, V+1) bool

    def __post_init__(self):
        flags = np.asarray(self.flags, dtype=bool)
        if flags.shape != self.shape.point_dims:
            raise ValueError("flags must be (U+1, V+1)")
        object.__setattr__(self, "flags", flags)


def _stack_motions(motions) -> tuple[GridShape, np.ndarray]:
    if len(motions) == 0:
        raise ValueError("need at least one motion field")
    shape = motions[0].shape
    arrs = []
    for m in motions:
        if m.shape != shape:
            raise ValueError("motion fields must share a shape")
        arrs.append(m.displacements)
    return shape, np.stack(arrs)


def camera_trajectory(motions) -> Trajectory:
    """Chain per-point temporal motions into cumulative paths.

    The first motion is treated as zero, so positions[0] == 0.
    """
    shape, arr = _stack_motions(motions)
    arr = arr.copy()
    arr[0] = 0.0
    return Trajectory(shape, np.cumsum(arr, axis=0))


def stitch_motion(rig: ControlGrid, ms_prev: ControlGrid, ms_cur: ControlGrid,
                  mt_cur: ControlGrid) -> MotionField:
    """Relative stitching motion of the warped target between frames.

    The temporal mesh is carried through the previous frame's spatial warp
    (TPS from the rigid mesh to the previous spatial mesh) and compared with
    the current spatial mesh.
    """
    if not (rig.shape == ms_prev.shape == ms_cur.shape == mt_cur.shape):
        raise ValueError("grids must share a shape")
    warp = tps_fit(rig, ms_prev)
    carried = tps_eval(warp, mt_cur.flat).reshape(mt_cur.points.shape)
    return MotionField(rig.shape, carried - ms_cur.points)


def stitch_trajectory(stitch_motions) -> Trajectory:
    """Chain relative stitching motions; the first motion is defined as zero."""
    shape, arr = _stack_motions(stitch_motions)
    arr = arr.copy()
    arr[0] = 0.0
    return Trajectory(shape, np.cumsum(arr, axis=0))


def motions_from_trajectory(traj: Trajectory) -> np.ndarray:
    """Frame-to-frame differences; inverse of the chaining operation."""
    out = np.diff(traj.positions, axis=0, prepend=traj.positions[:1])
    return out


def overlap_mask(ms: ControlGrid, width: float, height: float) -> OverlapMask:
    """Flags of spatial-mesh vertices inside the reference frame extent."""
    pts = ms.flat
    flags = inside_extent(pts[:, 0], pts[:, 1], width, height)
    return OverlapMask(ms.shape, flags.reshape(ms.shape.point_dims))


# ---------------------------------------------------------------------------
# CSV export (columns: t, u, v, x, y; t is 1-based)
# ---------------------------------------------------------------------------

TRAJECTORY_CSV_HEADER = ["t", "u", "v", "x", "y"]


def write_positions_csv(path, positions: np.ndarray) -> None:
    """Write an (N_t, U+1, V+1, 2) position array as a flat CSV."""
    positions = np.asarray(positions)
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAJECTORY_CSV_HEADER)
        n_t, rows, cols, _ = positions.shape
        for t in range(n_t):
            for u in range(rows):
                for v in range(cols):
                    x, y = positions[t, u, v]
                    writer.writerow([t + 1, u, v, repr(float(x)), repr(float(y))])


def read_positions_csv(path) -> np.ndarray:
    """Read a trajectory/mesh CSV back into an (N_t, U+1, V+1, 2) array."""
    path = Path(path)
    rows = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != TRAJECTORY_CSV_HEADER:
            raise ValueError(f"unexpected CSV header {header} in {path}")
        for rec in reader:
            rows.append((int(rec[0]), int(rec[1]), int(rec[2]),
                         float(rec[3]), float(rec[4])))
    if not rows:
        raise ValueError(f"empty trajectory CSV {path}")
    n_t = max(r[0] for r in rows)
    n_u = max(r[1] for r in rows) + 1
    n_v = max(r[2] for r in rows) + 1
    out = np.full((n_t, n_u, n_v, 2), np.nan)
    for t, u, v, x, y in rows:
        out[t - 1, u, v] = (x, y)
    if np.isnan(out).any():
        raise ValueError(f"trajectory CSV {path} has missing entries")
    return out
