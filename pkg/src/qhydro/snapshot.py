"""Field snapshot container shared by both solvers and the analysis code."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True, eq=False)
class FieldSnapshot:
    """Hydrodynamic fields on the points of a uniform rectangular mesh.

    The mesh may be a full rectangle (oracle) or the subset of nodes above the
    density cutoff (trajectory engine). Node k sits at
    ``origin + (i_k * spacing[0], j_k * spacing[1])`` for integers i_k, j_k.
    Velocity entries are NaN where they were not evaluated; S is NaN when no
    action field is available.
    """

    time: float
    x: np.ndarray
    y: np.ndarray
    rho: np.ndarray
    vx: np.ndarray
    vy: np.ndarray
    S: np.ndarray
    spacing: tuple[float, float]
    origin: tuple[float, float] = (0.0, 0.0)
    source: str = "qtm"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.x)
        for name in ("y", "rho", "vx", "vy", "S"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"field {name!r} does not match the mesh size")
        if not (self.spacing[0] > 0 and self.spacing[1] > 0):
            raise ValueError("mesh spacings must be positive")
        if np.any(self.rho < 0):
            raise ValueError("density must be non-negative")

    @property
    def size(self) -> int:
        return len(self.x)

    @property
    def cell_area(self) -> float:
        return self.spacing[0] * self.spacing[1]

    @property
    def positions(self) -> np.ndarray:
        return np.column_stack([self.x, self.y])

    def norm(self) -> float:
        return float(np.sum(self.rho) * self.cell_area)

    def indices(self) -> tuple[np.ndarray, np.ndarray]:
        """Integer mesh indices of every node."""
        i = np.rint((self.x - self.origin[0]) / self.spacing[0]).astype(np.int64)
        j = np.rint((self.y - self.origin[1]) / self.spacing[1]).astype(np.int64)
        return i, j

    def value_at(self, name: str, x: float, y: float) -> float:
        """Field value at the mesh node nearest to (x, y)."""
        k = int(np.argmin((self.x - x) ** 2 + (self.y - y) ** 2))
        return float(getattr(self, name)[k])

    def equals(self, other: "FieldSnapshot") -> bool:
        """Bit-exact comparison of all arrays and the time stamp (NaN equal to NaN)."""
        if self.time != other.time or self.spacing != other.spacing:
            return False
        if self.origin != other.origin or self.source != other.source:
            return False
        return all(
            np.array_equal(getattr(self, n), getattr(other, n), equal_nan=True)
            for n in ("x", "y", "rho", "vx", "vy", "S")
        )
