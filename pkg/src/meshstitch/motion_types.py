"""Motion field type shared by estimation, trajectory, and synthesis code."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid_warp import ControlGrid, GridShape


@dataclass(frozen=True)
class MotionField:
    """Per-control-point 2D displacements on a (U+1) x (V+1) grid."""

    shape: GridShape
    displacements: np.ndarray  # (U+1, V+1, 2)

    def __post_init__(self):
        disp = np.asarray(self.displacements, dtype=np.float64)
        expected = self.shape.point_dims + (2,)
        if disp.shape != expected:
            raise ValueError(f"displacements shape {disp.shape} != {expected}")
        if not np.all(np.isfinite(disp)):
            raise ValueError("displacements must be finite")
        object.__setattr__(self, "displacements", disp)

    @classmethod
    def zero(cls, shape: GridShape) -> "MotionField":
        return cls(shape, np.zeros(shape.point_dims + (2,)))

    @property
    def flat(self) -> np.ndarray:
        return self.displacements.reshape(-1, 2)

    def mesh(self, rigid: ControlGrid) -> ControlGrid:
        """Control grid displaced from the given rigid mesh."""
        if rigid.shape != self.shape:
            raise ValueError("rigid mesh shape mismatch")
        return ControlGrid(self.shape, rigid.points + self.displacements)
