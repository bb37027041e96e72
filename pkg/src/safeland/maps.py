"""Dense and sparse depth grids shared by every stage of the pipeline.

Unknown / invalid pixels are stored as NaN.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEPTH_KINDS = ("plane", "ray")


@dataclass(eq=False)
class DepthMap:
    """Per-pixel depth in meters; ``kind`` says whether values are plane depth
    (camera z) or ray length."""

    grid: np.ndarray
    kind: str = "plane"

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        if self.grid.ndim != 2:
            raise ValueError("depth grid must be 2-D")
        if self.kind not in DEPTH_KINDS:
            raise ValueError(f"kind must be one of {DEPTH_KINDS}")
        known = np.isfinite(self.grid)
        if np.any(self.grid[known] <= 0):
            raise ValueError("known depths must be positive")

    @property
    def shape(self):
        return self.grid.shape

    @property
    def known(self) -> np.ndarray:
        return np.isfinite(self.grid)

    def copy(self) -> "DepthMap":
        return DepthMap(self.grid.copy(), self.kind)

    @classmethod
    def constant(cls, shape, value, mask=None, kind="plane") -> "DepthMap":
        g = np.full(shape, float(value))
        if mask is not None:
            g[~mask] = np.nan
        return cls(g, kind)


@dataclass(eq=False)
class SparseDepth:
    """Sparse plane-depth samples with per-pixel acquisition timestamps."""

    grid: np.ndarray
    source_time: np.ndarray | None = None
    reference_time: float = 0.0

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        if self.source_time is None:
            self.source_time = np.where(np.isfinite(self.grid), self.reference_time, np.nan)
        self.source_time = np.asarray(self.source_time, dtype=float)
        if self.source_time.shape != self.grid.shape:
            raise ValueError("source_time must match the grid shape")
        valid = np.isfinite(self.grid)
        if np.any(self.grid[valid] <= 0):
            raise ValueError("valid sparse depths must be positive")

    @property
    def shape(self):
        return self.grid.shape

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.grid)

    @property
    def count(self) -> int:
        return int(self.valid.sum())

    @property
    def density(self) -> float:
        return self.count / self.grid.size

    def is_empty(self) -> bool:
        return self.count == 0

    @classmethod
    def empty(cls, shape, reference_time=0.0) -> "SparseDepth":
        return cls(np.full(shape, np.nan), np.full(shape, np.nan), reference_time)

    @classmethod
    def from_dense(cls, depth, mask, reference_time=0.0) -> "SparseDepth":
        g = np.where(mask, np.asarray(depth, dtype=float), np.nan)
        return cls(g, np.where(np.isfinite(g), reference_time, np.nan), reference_time)
