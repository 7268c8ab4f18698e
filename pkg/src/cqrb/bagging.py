"""Equal-width grid bagging of density-flow observations.

Each nonempty grid cell becomes one bag located at the centroid of its
members and weighted by the share of observations it holds.
"""

from __future__ import annotations

import csv
import io
import os
import warnings
from typing import Iterable, Sequence, Union

import numpy as np

from .core import AggregatedObservation, Bag, BagGrid, kq_arrays

# (u, v_segments) grids used for the raw-data comparison and for road sections
PRESETS = {"dense": (70, 400), "coarse": (20, 200)}

BAG_HEADER = ("k_centroid", "q_centroid", "weight", "count", "row", "col")


class BaggingError(ValueError):
    pass


def _as_kq(obs) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(obs, tuple) and len(obs) == 2:
        k = np.asarray(obs[0], dtype=float).ravel()
        q = np.asarray(obs[1], dtype=float).ravel()
        if k.size != q.size:
            raise BaggingError("k and q differ in length")
        return k, q
    return kq_arrays(obs)


def make_grid(obs, u: int, v_segments: int) -> BagGrid:
    """Grid spanning the data extent with ``u`` density and ``v_segments`` flow cells.

    ``obs`` is a sequence of AggregatedObservation or a ``(k, q)`` pair.
    An axis with no spread collapses to a single segment.
    """
    if u < 1 or v_segments < 1:
        raise BaggingError("u and v_segments must be >= 1")
    k, q = _as_kq(obs)
    if k.size == 0:
        raise BaggingError("cannot build a grid from no observations")
    k_range = (float(k.min()), float(k.max()))
    q_range = (float(q.min()), float(q.max()))
    if k_range[0] == k_range[1] and u > 1:
        warnings.warn("all densities equal; density axis collapsed to one segment")
        u = 1
    if q_range[0] == q_range[1] and v_segments > 1:
        warnings.warn("all flows equal; flow axis collapsed to one segment")
        v_segments = 1
    return BagGrid(u, v_segments, k_range, q_range)


def _cell_index(x: np.ndarray, edges: np.ndarray, segments: int, axis: str) -> np.ndarray:
    lo, hi = edges[0], edges[-1]
    if np.any((x < lo) | (x > hi)):
        bad = x[(x < lo) | (x > hi)][0]
        raise BaggingError(f"{axis}={bad!r} lies outside the grid [{lo}, {hi}]")
    # right-open cells; the top edge belongs to the last cell
    idx = np.searchsorted(edges, x, side="right") - 1
    return np.clip(idx, 0, segments - 1)


def assign_cells(obs, grid: BagGrid) -> tuple[np.ndarray, np.ndarray]:
    """(row, col) cell indices for each observation."""
    k, q = _as_kq(obs)
    rows = _cell_index(k, grid.k_edges, grid.u, "k")
    cols = _cell_index(q, grid.q_edges, grid.v_segments, "q")
    return rows, cols


def bag_observations(obs, grid: BagGrid) -> list[Bag]:
    """One bag per nonempty cell, ordered by (row, col)."""
    k, q = _as_kq(obs)
    n = k.size
    if n == 0:
        raise BaggingError("no observations to bag")
    rows, cols = assign_cells((k, q), grid)
    flat = rows * grid.v_segments + cols
    cells, inverse, counts = np.unique(flat, return_inverse=True, return_counts=True)
    ksum = np.bincount(inverse, weights=k)
    qsum = np.bincount(inverse, weights=q)
    ke, qe = grid.k_edges, grid.q_edges
    bags = []
    for j, cell in enumerate(cells):
        r, c = divmod(int(cell), grid.v_segments)
        p = int(counts[j])
        kc = min(max(ksum[j] / p, ke[r]), ke[r + 1])
        qc = min(max(qsum[j] / p, qe[c]), qe[c + 1])
        bags.append(Bag(float(kc), float(qc), p / n, p, (r, c)))
    return bags


def bag_reduction_report(obs, bags: Sequence[Bag]) -> dict:
    k, _ = _as_kq(obs)
    n = int(k.size)
    count = len(bags)
    return {"n": n, "bag_count": count, "ratio": n / count if count else float("nan")}


def bag_arrays(bags: Sequence[Bag]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Centroid densities, centroid flows and weights as arrays."""
    k = np.array([b.k_centroid for b in bags], dtype=float)
    q = np.array([b.q_centroid for b in bags], dtype=float)
    w = np.array([b.weight for b in bags], dtype=float)
    return k, q, w


def bags_to_csv(bags: Iterable[Bag]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(BAG_HEADER)
    for b in bags:
        writer.writerow([repr(b.k_centroid), repr(b.q_centroid), repr(b.weight),
                         b.point_count, b.cell[0], b.cell[1]])
    return buf.getvalue()


def bags_from_csv(text: str) -> list[Bag]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != BAG_HEADER:
        raise BaggingError(f"bag file must start with header {','.join(BAG_HEADER)}")
    bags = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            kc, qc, w, p, r, c = row
            bags.append(Bag(float(kc), float(qc), float(w), int(p), (int(r), int(c))))
        except ValueError as exc:
            raise BaggingError(f"line {lineno}: {exc}") from None
    return bags


def write_bags(path: Union[str, os.PathLike], bags: Iterable[Bag]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(bags_to_csv(bags))


def read_bags(path: Union[str, os.PathLike]) -> list[Bag]:
    with open(path, encoding="utf-8") as fh:
        return bags_from_csv(fh.read())


def bag_observation_list(observations: Sequence[AggregatedObservation], u: int,
                         v_segments: int) -> tuple[BagGrid, list[Bag]]:
    """Convenience: grid from the data extent, then bag."""
    grid = make_grid(observations, u, v_segments)
    return grid, bag_observations(observations, grid)
