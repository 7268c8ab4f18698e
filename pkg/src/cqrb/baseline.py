"""Triangular fundamental diagram calibrated from observations.

The calibration follows the usual two-branch recipe: a free-flow line through
the origin, capacity at the largest observed flow, and a congested line
through the apex fitted by least squares.  The exact thresholds are fixed
here and versioned, so errors computed against this baseline can cite it.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import PiecewiseLinearCurve, Segment, kq_arrays

log = logging.getLogger(__name__)

BASELINE_VERSION = "triangular-ls-1"
# densities below this fraction of the critical density count as free flow
FREE_FLOW_FRACTION = 0.9


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class TriangularFd:
    free_flow_speed: float
    capacity: float
    critical_density: float
    congested_wave_speed: Optional[float] = None
    jam_density: Optional[float] = None

    def __post_init__(self):
        vf, qc, kc = self.free_flow_speed, self.capacity, self.critical_density
        if not (vf > 0 and qc > 0 and kc > 0):
            raise CalibrationError("free-flow speed, capacity and critical density must be positive")
        if abs(qc - vf * kc) > 1e-6 * qc:
            raise CalibrationError("capacity must equal free-flow speed times critical density")
        w, kj = self.congested_wave_speed, self.jam_density
        if (w is None) != (kj is None):
            raise CalibrationError("wave speed and jam density are both set or both absent")
        if w is not None:
            if not w < 0:
                raise CalibrationError("congested wave speed must be negative")
            if abs(qc + w * (kj - kc)) > 1e-6 * qc:
                raise CalibrationError("congested branch must reach zero flow at the jam density")

    @property
    def has_congested_branch(self) -> bool:
        return self.congested_wave_speed is not None

    def as_dict(self) -> dict:
        return {
            "version": BASELINE_VERSION,
            "free_flow_speed": self.free_flow_speed,
            "capacity": self.capacity,
            "critical_density": self.critical_density,
            "congested_wave_speed": self.congested_wave_speed,
            "jam_density": self.jam_density,
        }


def _through_origin_slope(k: np.ndarray, q: np.ndarray) -> float:
    den = float(k @ k)
    if den == 0:
        raise CalibrationError("no free-flow observations with positive density")
    return float(k @ q) / den


def calibrate_dgkhv(obs) -> TriangularFd:
    """Calibrate from observations or a ``(k, q)`` pair of arrays."""
    if isinstance(obs, tuple) and len(obs) == 2:
        k = np.asarray(obs[0], dtype=float).ravel()
        q = np.asarray(obs[1], dtype=float).ravel()
    else:
        k, q = kq_arrays(obs)
    if k.size == 0:
        raise CalibrationError("no observations")
    i_max = int(np.argmax(q))
    q_c = float(q[i_max])
    if q_c <= 0:
        raise CalibrationError("all flows are zero")

    free = k < FREE_FLOW_FRACTION * k[i_max]
    if not free.any():
        free = k <= k[i_max]
    v_f = _through_origin_slope(k[free], q[free])
    # one refinement with the threshold taken from the implied critical density
    free = k < FREE_FLOW_FRACTION * q_c / v_f
    if free.any():
        v_f = _through_origin_slope(k[free], q[free])
    k_c = q_c / v_f

    cong = k > k_c
    if not cong.any():
        log.warning("no observations beyond the critical density; congested branch absent")
        return TriangularFd(v_f, q_c, k_c)
    dk = k[cong] - k_c
    w = float(dk @ (q[cong] - q_c)) / float(dk @ dk)
    if not w < 0:
        log.warning("congested observations do not fall off; congested branch absent")
        return TriangularFd(v_f, q_c, k_c)
    k_j = k_c - q_c / w
    return TriangularFd(v_f, q_c, k_c, w, k_j)


def evaluate_triangular(fd: TriangularFd, k):
    """min(v_f k, q_c + w (k - k_c)), floored at zero."""
    k = np.asarray(k, dtype=float)
    if np.any(k < 0):
        raise ValueError("density must be >= 0")
    free = fd.free_flow_speed * k
    if fd.has_congested_branch:
        cong = fd.capacity + fd.congested_wave_speed * (k - fd.critical_density)
    else:
        cong = np.full_like(k, fd.capacity)
    out = np.maximum(np.minimum(free, cong), 0.0)
    return out if out.ndim else float(out)


def triangular_curve(fd: TriangularFd, k_max: Optional[float] = None) -> PiecewiseLinearCurve:
    """Two-piece curve; without a congested branch the second piece is flat up to ``k_max``."""
    kc = fd.critical_density
    rising = Segment(0.0, fd.free_flow_speed, 0.0, kc)
    if fd.has_congested_branch:
        w = fd.congested_wave_speed
        falling = Segment(fd.capacity - w * kc, w, kc, fd.jam_density)
        return PiecewiseLinearCurve((rising, falling), meta={"baseline": BASELINE_VERSION})
    end = kc if k_max is None else max(kc, float(k_max))
    if end == kc:
        return PiecewiseLinearCurve((rising,), meta={"baseline": BASELINE_VERSION})
    flat = Segment(fd.capacity, 0.0, kc, end)
    return PiecewiseLinearCurve((rising, flat), meta={"baseline": BASELINE_VERSION})


def fd_to_json(fd: TriangularFd) -> str:
    return json.dumps(fd.as_dict(), indent=2, sort_keys=True)


def fd_from_json(text: str) -> TriangularFd:
    d = json.loads(text)
    version = d.get("version", BASELINE_VERSION)
    if version != BASELINE_VERSION:
        log.warning("baseline file version %s differs from %s", version, BASELINE_VERSION)

    def opt(name):
        v = d.get(name)
        return None if v is None or (isinstance(v, float) and math.isnan(v)) else float(v)

    return TriangularFd(float(d["free_flow_speed"]), float(d["capacity"]),
                        float(d["critical_density"]), opt("congested_wave_speed"),
                        opt("jam_density"))
