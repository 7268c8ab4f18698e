"""Domain types shared across the package.

All types are immutable once built; numeric fields are 64-bit floats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np


class CurveError(ValueError):
    """Raised when a piecewise-linear curve violates its invariants."""


@dataclass(frozen=True)
class VehicleRecord:
    timestamp: datetime
    station_id: str
    direction: int
    lane: int
    speed: float
    faulty: bool = False

    def __post_init__(self):
        if not math.isfinite(self.speed) or self.speed < 0:
            raise ValueError(f"speed must be finite and >= 0, got {self.speed!r}")
        if self.lane < 1:
            raise ValueError(f"lane must be >= 1, got {self.lane!r}")
        if self.direction not in (1, 2):
            raise ValueError(f"direction must be 1 or 2, got {self.direction!r}")


@dataclass(frozen=True)
class AggregatedObservation:
    """One aggregation interval: density k [veh/km], flow q [veh/h], speed v [km/h]."""

    k: float
    q: float
    v: float
    interval_start: Optional[datetime] = None
    group_key: str = ""
    count: int = 0

    def __post_init__(self):
        for name in ("k", "q", "v"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {value!r}")
        if self.q > 0:
            if self.v <= 0:
                raise ValueError("positive flow requires positive speed")
            if abs(self.k - self.q / self.v) > 1e-9 * max(1.0, self.k):
                raise ValueError("k, q, v violate q = k v")
        if self.count < 0:
            raise ValueError("count must be >= 0")


def kq_arrays(observations: Iterable[AggregatedObservation]) -> tuple[np.ndarray, np.ndarray]:
    """Split a sequence of observations into density and flow arrays."""
    obs = list(observations)
    k = np.fromiter((o.k for o in obs), dtype=float, count=len(obs))
    q = np.fromiter((o.q for o in obs), dtype=float, count=len(obs))
    return k, q


@dataclass(frozen=True)
class BagGrid:
    """Equal-width grid over the (k, q) plane.

    ``u`` counts density segments and ``v_segments`` flow segments.
    """

    u: int
    v_segments: int
    k_range: tuple[float, float]
    q_range: tuple[float, float]

    def __post_init__(self):
        if self.u < 1 or self.v_segments < 1:
            raise ValueError("grid needs at least one segment per axis")
        for lo, hi in (self.k_range, self.q_range):
            if not (math.isfinite(lo) and math.isfinite(hi)) or hi < lo:
                raise ValueError(f"invalid axis range ({lo}, {hi})")

    @property
    def k_edges(self) -> np.ndarray:
        return _edges(self.k_range, self.u)

    @property
    def q_edges(self) -> np.ndarray:
        return _edges(self.q_range, self.v_segments)

    def cell_bounds(self, row: int, col: int) -> tuple[float, float, float, float]:
        """(k_lo, k_hi, q_lo, q_hi) for the cell at density index ``row``, flow index ``col``."""
        ke, qe = self.k_edges, self.q_edges
        return float(ke[row]), float(ke[row + 1]), float(qe[col]), float(qe[col + 1])


def _edges(bounds: tuple[float, float], segments: int) -> np.ndarray:
    lo, hi = bounds
    if hi == lo:
        return np.array([lo, hi], dtype=float)
    edges = np.linspace(lo, hi, segments + 1)
    edges[-1] = hi
    return edges


@dataclass(frozen=True)
class Bag:
    k_centroid: float
    q_centroid: float
    weight: float
    point_count: int
    cell: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if not (0 < self.weight <= 1):
            raise ValueError(f"bag weight must be in (0, 1], got {self.weight!r}")
        if self.point_count < 1:
            raise ValueError("bag must hold at least one point")


@dataclass(frozen=True)
class Hyperplane:
    alpha: float
    beta: float
    anchor_k: float = float("nan")

    def __call__(self, k):
        return self.alpha + self.beta * np.asarray(k, dtype=float)


@dataclass(frozen=True)
class Segment:
    alpha: float
    beta: float
    k_lo: float
    k_hi: float


@dataclass(frozen=True)
class PiecewiseLinearCurve:
    """Concave piecewise-linear density-flow curve.

    Evaluation is the minimum over the segment hyperplanes, so the curve is
    concave on the whole half-line and extrapolates with the terminal pieces.
    """

    segments: tuple[Segment, ...]
    tau: Optional[float] = None
    gamma: Optional[float] = None
    meta: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        segs = tuple(self.segments)
        object.__setattr__(self, "segments", segs)
        if not segs:
            raise CurveError("curve needs at least one segment")
        for s in segs:
            if not all(math.isfinite(x) for x in (s.alpha, s.beta, s.k_lo, s.k_hi)):
                raise CurveError("segment fields must be finite")
            if s.k_hi < s.k_lo:
                raise CurveError(f"segment with k_hi < k_lo: {s}")
        for a, b in zip(segs, segs[1:]):
            if abs(a.k_hi - b.k_lo) > 1e-9 * max(1.0, abs(a.k_hi)):
                raise CurveError(f"segments not contiguous at k={a.k_hi} / {b.k_lo}")
            if not b.beta < a.beta:
                raise CurveError("segment slopes must be strictly decreasing")
        if self.tau is not None and not (0 < self.tau < 1):
            raise CurveError(f"tau must lie in (0, 1), got {self.tau}")

    @classmethod
    def from_table(cls, rows: Sequence[Sequence[float]], **kwargs) -> "PiecewiseLinearCurve":
        """Build from ``(alpha, beta, k_lo, k_hi)`` rows."""
        return cls(tuple(Segment(*map(float, r)) for r in rows), **kwargs)

    @property
    def alphas(self) -> np.ndarray:
        return np.array([s.alpha for s in self.segments])

    @property
    def betas(self) -> np.ndarray:
        return np.array([s.beta for s in self.segments])

    @property
    def k_lo(self) -> float:
        return self.segments[0].k_lo

    @property
    def k_hi(self) -> float:
        return self.segments[-1].k_hi

    @property
    def piece_count(self) -> int:
        return len(self.segments)

    @property
    def breakpoints(self) -> np.ndarray:
        """Interior knots only."""
        return np.array([s.k_hi for s in self.segments[:-1]])

    @property
    def knots(self) -> np.ndarray:
        """Domain start, interior knots and domain end."""
        return np.array([self.segments[0].k_lo] + [s.k_hi for s in self.segments])

    def hyperplanes(self) -> list[Hyperplane]:
        return [Hyperplane(s.alpha, s.beta) for s in self.segments]

    def __call__(self, k):
        k = np.asarray(k, dtype=float)
        values = self.alphas[:, None] + self.betas[:, None] * k.reshape(1, -1)
        out = values.min(axis=0)
        return out.reshape(k.shape) if k.ndim else float(out[0])


class SolverStatus(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    ITERATION_LIMIT = "iteration-limit"
    NUMERIC_FAILURE = "numeric-failure"


@dataclass(frozen=True)
class SolverSolution:
    objective: float
    variables: np.ndarray
    status: SolverStatus
    residuals_plus: Optional[np.ndarray] = None
    residuals_minus: Optional[np.ndarray] = None
    iterations: int = 0
    message: str = ""
    duals: dict = field(default_factory=dict, compare=False)

    @property
    def optimal(self) -> bool:
        return self.status is SolverStatus.OPTIMAL

    @property
    def residuals(self) -> Optional[np.ndarray]:
        """Signed residuals q - f(k); None if the problem carries no residual block."""
        if self.residuals_plus is None:
            return None
        return self.residuals_plus - self.residuals_minus


@dataclass(frozen=True)
class TrafficParameters:
    capacity: float
    critical_density: float
    jam_density: Optional[float]
    free_flow_speed: float
    wave_speeds: tuple[float, ...]
    piece_count: int
    warnings: tuple[str, ...] = ()

    def as_dict(self) -> dict:
        return {
            "capacity": self.capacity,
            "critical_density": self.critical_density,
            "jam_density": self.jam_density,
            "free_flow_speed": self.free_flow_speed,
            "wave_speeds": list(self.wave_speeds),
            "piece_count": self.piece_count,
            "warnings": list(self.warnings),
        }
