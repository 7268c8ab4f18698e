"""Synthetic traffic data with a known triangular truth, for self-tests and demos."""

from __future__ import annotations

from dataclasses import dataclass
from datetime import date, datetime, timedelta

import numpy as np

from .core import AggregatedObservation, VehicleRecord


@dataclass(frozen=True)
class TriangularTruth:
    free_flow_speed: float = 80.0
    capacity: float = 2000.0
    jam_density: float = 135.0

    @property
    def critical_density(self) -> float:
        return self.capacity / self.free_flow_speed

    @property
    def wave_speed(self) -> float:
        return -self.capacity / (self.jam_density - self.critical_density)

    def __call__(self, k):
        k = np.asarray(k, dtype=float)
        out = np.minimum(self.free_flow_speed * k,
                         self.capacity + self.wave_speed * (k - self.critical_density))
        return np.maximum(out, 0.0)


def sample_densities(n: int, truth: TriangularTruth, rng: np.random.Generator,
                     congested_share: float = 0.3) -> np.ndarray:
    """Densities mixing free-flow and congested states."""
    kc, kj = truth.critical_density, truth.jam_density
    congested = rng.random(n) < congested_share
    k = np.where(congested, rng.uniform(kc, 0.95 * kj, n), rng.uniform(0.02 * kc, kc, n))
    return k


def noisy_flows(k, truth: TriangularTruth, rng: np.random.Generator, sigma: float = 0.05,
                noise: str = "gaussian") -> np.ndarray:
    """Flows around the truth with relative noise level ``sigma``.

    ``gaussian`` is symmetric; ``skewed`` adds occasional large drops in flow
    (incidents, platoon gaps), giving a long lower tail with median near the truth.
    """
    f = truth(k)
    if noise == "gaussian":
        q = f * (1.0 + sigma * rng.standard_normal(f.size))
    elif noise == "skewed":
        base = sigma * rng.standard_normal(f.size)
        drops = rng.random(f.size) < 0.25
        base = base - drops * rng.exponential(6 * sigma, f.size)
        q = f * (1.0 + base)
    else:
        raise ValueError(f"unknown noise model {noise!r}")
    return np.maximum(q, 0.0)


def triangular_sample(n: int, seed: int = 0, truth: TriangularTruth = TriangularTruth(),
                      sigma: float = 0.05, noise: str = "gaussian",
                      congested_share: float = 0.3) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    k = sample_densities(n, truth, rng, congested_share)
    return k, noisy_flows(k, truth, rng, sigma, noise)


def observations_from_arrays(k, q, start: datetime, interval: int = 5,
                             group: str = "synthetic:1") -> list[AggregatedObservation]:
    """Wrap (k, q) pairs as consecutive interval observations."""
    out = []
    for i, (ki, qi) in enumerate(zip(np.asarray(k, float), np.asarray(q, float))):
        v = qi / ki if ki > 0 and qi > 0 else 0.0
        kk = qi / v if v > 0 else float(ki)
        out.append(AggregatedObservation(k=float(kk), q=float(qi), v=float(v),
                                         interval_start=start + timedelta(minutes=interval * i),
                                         group_key=group, count=int(round(qi * interval / 60))))
    return out


def _density_profile(minutes: np.ndarray, truth: TriangularTruth, rng) -> np.ndarray:
    kc = truth.critical_density
    morning = np.exp(-0.5 * ((minutes - 8 * 60) / 50.0) ** 2)
    evening = np.exp(-0.5 * ((minutes - 16.5 * 60) / 70.0) ** 2)
    base = 0.35 * kc + 2.2 * kc * (morning + 0.9 * evening)
    return np.clip(base * np.exp(0.15 * rng.standard_normal(minutes.size)), 0.5, 0.9 * truth.jam_density)


def vehicle_records(day: date, seed: int = 0, station: str = "S1", lanes: int = 2,
                    truth: TriangularTruth = TriangularTruth(), interval: int = 5,
                    faulty_rate: float = 0.01) -> list[VehicleRecord]:
    """Per-vehicle passages for one day at one station, both directions.

    The truth is per lane; each interval's lane flow follows it with 5% noise.
    """
    rng = np.random.default_rng(seed)
    starts = np.arange(0, 24 * 60, interval)
    records = []
    t0 = datetime(day.year, day.month, day.day)
    for direction in (1, 2):
        density = _density_profile(starts.astype(float), truth, rng)
        for lane in range(1, lanes + 1):
            k = density * rng.uniform(0.9, 1.1, density.size)
            q = truth(k) * (1 + 0.05 * rng.standard_normal(k.size))
            counts = rng.poisson(np.maximum(q, 1.0) * interval / 60.0)
            for m, c, ki, qi in zip(starts, counts, k, q):
                if c == 0:
                    continue
                v_mean = max(qi, 1.0) / ki
                speeds = np.clip(v_mean * np.exp(0.1 * rng.standard_normal(c)), 3.0, 160.0)
                offsets = np.sort(rng.uniform(0, interval * 60, c))
                for s, off in zip(speeds, offsets):
                    records.append(VehicleRecord(
                        timestamp=t0 + timedelta(minutes=int(m), seconds=float(off)),
                        station_id=station, direction=direction, lane=lane,
                        speed=float(round(s, 1)), faulty=bool(rng.random() < faulty_rate)))
    records.sort(key=lambda r: (r.timestamp, r.direction, r.lane))
    return records


def period_datasets(labels, n: int = 400, seed: int = 0, truth: TriangularTruth = TriangularTruth(),
                    sigma: float = 0.05, noise: str = "skewed") -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Independent (k, q) samples keyed by period label."""
    out = {}
    for i, label in enumerate(sorted(labels)):
        out[label] = triangular_sample(n, seed=seed * 1000 + i, truth=truth, sigma=sigma, noise=noise)
    return out
