"""Convex regression estimators: CNLS, CQR, penalized CQR and CQR with bags.

Every builder returns a :class:`~cqrb.solver.LinearProgram` or
:class:`~cqrb.solver.QuadraticProgram` whose variables are laid out as

    alpha (n) | beta (n*m) | residual block

with ``problem.layout`` naming each slice.  Observation ``i`` owns the
hyperplane ``alpha_i + beta_i' k``; the fitted function is the minimum over
all hyperplanes, which is concave by construction.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp

from .core import Bag, CurveError, PiecewiseLinearCurve, Segment, SolverSolution
from .solver import LinearProgram, QuadraticProgram, SolverConfig, solve

log = logging.getLogger(__name__)

# |eps| below this (times 1 + |q|) counts as a zero residual
ZERO_RESIDUAL_TOL = 1e-7
# vertical slack when rebuilding a concave curve from fitted values
CANONICAL_FTOL = 1e-8


class EstimationError(ValueError):
    """Invalid estimator input or a fit that did not reach optimality."""


class Method(str, Enum):
    CNLS = "cnls"
    CQR = "cqr"
    PCQR = "pcqr"
    CQRB = "cqrb"

    @property
    def is_quantile(self) -> bool:
        return self is not Method.CNLS

    @property
    def is_penalized(self) -> bool:
        return self in (Method.PCQR, Method.CQRB)


@dataclass(frozen=True)
class EstimatorSpec:
    method: Method
    tau: Optional[float] = None
    gamma: Optional[float] = None
    monotone: bool = False
    anchor_origin: Optional[bool] = None

    def __post_init__(self):
        method = Method(self.method)
        object.__setattr__(self, "method", method)
        if method.is_quantile != (self.tau is not None):
            raise EstimationError(f"tau must be given iff the method is quantile-based ({method.value})")
        if self.tau is not None:
            _check_tau(self.tau)
        if method.is_penalized and self.gamma is None:
            object.__setattr__(self, "gamma", 0.0)
        if not method.is_penalized and self.gamma is not None:
            raise EstimationError(f"gamma is not a parameter of {method.value}")
        if self.gamma is not None and self.gamma < 0:
            raise EstimationError("gamma must be >= 0")
        if self.anchor_origin is None:
            object.__setattr__(self, "anchor_origin", method is Method.CQRB)


def _check_tau(tau: float) -> None:
    if not (0.0 < tau < 1.0):
        raise EstimationError(f"tau must lie in (0, 1), got {tau}")


def _prepare(k, q) -> tuple[np.ndarray, np.ndarray]:
    k = np.asarray(k, dtype=float)
    if k.ndim == 1:
        k = k[:, None]
    q = np.asarray(q, dtype=float).ravel()
    if k.ndim != 2 or k.shape[0] != q.size:
        raise EstimationError("k must be (n,) or (n, m) and match q in length")
    if not (np.all(np.isfinite(k)) and np.all(np.isfinite(q))):
        raise EstimationError("k and q must be finite")
    if q.size < 2:
        raise EstimationError("at least two observations are required")
    if np.all(k == k[0]):
        raise EstimationError("all densities identical; the concave fit is unidentified")
    return k, q


# -- constraint generators -------------------------------------------------

def _pairwise_rows(k: np.ndarray):
    """All n(n-1) concavity rows  alpha_i + beta_i'k_i <= alpha_s + beta_s'k_i.

    Pairs of observations with identical k collapse to a single equality row.
    Returns (ub_triplets, n_ub, eq_triplets, n_eq) over the alpha|beta block.
    """
    n, m = k.shape
    ii, ss = np.nonzero(~np.eye(n, dtype=bool))
    tie = np.all(k[ii] == k[ss], axis=1)
    ub = ~tie
    eqmask = tie & (ii < ss)
    return _rows_for(ii[ub], ss[ub], k, n, m), int(ub.sum()), \
        _rows_for(ii[eqmask], ss[eqmask], k, n, m), int(eqmask.sum())


def _rows_for(ii, ss, k, n, m):
    r = np.arange(ii.size)
    rows = [r, r]
    cols = [ii, ss]
    vals = [np.ones(ii.size), -np.ones(ii.size)]
    for d in range(m):
        kd = k[ii, d]
        rows += [r, r]
        cols += [n + ii * m + d, n + ss * m + d]
        vals += [kd, -kd]
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


def _sorted_rows(k1: np.ndarray, order: np.ndarray, chord0: int, pin_ends: bool = False):
    """O(n) concavity rows for univariate data visited in ``order``.

    Each consecutive pair a, b gets a chord-slope variable c (column
    ``chord0 + j``) with

        f_b - f_a = c (k_b - k_a),    beta_b <= c <= beta_a

    where f_i = alpha_i + beta_i k_i.  This is equivalent to the two
    cross-evaluation rows of the pair but stays well conditioned when
    densities nearly coincide; a tie reduces to f_b = f_a.

    With ``pin_ends`` the slopes of the smallest- and largest-density points
    are tied to their neighbouring chords.  That leaves the set of feasible
    fitted values unchanged but removes the unbounded direction beta -> +-inf
    which otherwise makes the optimal face of an unpenalized fit unbounded.
    """
    n = k1.size
    a, b = order[:-1], order[1:]
    h = k1[b] - k1[a]
    npair = a.size
    r = np.arange(npair)
    c = chord0 + r
    one = np.ones(npair)
    # row j: c_j - beta_a <= 0; row npair + j: beta_b - c_j <= 0
    ub_r = np.concatenate([r, r, npair + r, npair + r])
    ub_c = np.concatenate([c, n + a, n + b, c])
    ub_v = np.concatenate([one, -one, one, -one])
    eq = (np.concatenate([r] * 5),
          np.concatenate([b, n + b, a, n + a, c]),
          np.concatenate([one, k1[b], -one, -k1[a], -h]))
    pinned = np.zeros(2 * npair, dtype=bool)
    real = np.flatnonzero(h > 0)
    if pin_ends and real.size:
        j0, j1 = real[0], real[-1]
        pinned[:j0 + 1] = True
        pinned[npair:npair + j0] = True
        pinned[npair + j1:] = True
        pinned[j1 + 1:npair] = True
    if not pinned.any():
        return (ub_r, ub_c, ub_v), 2 * npair, eq, npair
    new_ub = np.cumsum(~pinned) - 1
    new_eq = npair + np.cumsum(pinned) - 1
    keep = ~pinned[ub_r]
    ub = (new_ub[ub_r[keep]], ub_c[keep], ub_v[keep])
    mv = pinned[ub_r]
    eq = (np.concatenate([eq[0], new_eq[ub_r[mv]]]), np.concatenate([eq[1], ub_c[mv]]),
          np.concatenate([eq[2], ub_v[mv]]))
    npin = int(pinned.sum())
    return ub, 2 * npair - npin, eq, npair + npin


def _sort_order(k1: np.ndarray, q: np.ndarray) -> np.ndarray:
    return np.lexsort((q, k1))


def _assemble(k, q, *, sorted_order, residual: str, c_res, Q_res=None,
              gamma: float = 0.0, monotone: bool = False, meta: Mapping):
    n, m = k.shape
    nab = n + n * m
    nres = n if residual == "eps" else 2 * n
    nchord = 0 if sorted_order is None else n - 1
    nvar = nab + nres + nchord
    if sorted_order is None:
        ub, n_ub, eqc, n_eqc = _pairwise_rows(k)
    else:
        ub, n_ub, eqc, n_eqc = _sorted_rows(k[:, 0], sorted_order, nab + nres,
                                            pin_ends=not gamma > 0)
    A_ub = sp.csr_matrix((ub[2], (ub[0], ub[1])), shape=(n_ub, nvar))
    A_ub.sum_duplicates()

    # regression rows: alpha_i + beta_i'k_i + residual = q_i
    r = np.arange(n)
    rows = [r] + [r] * m
    cols = [r] + [n + r * m + d for d in range(m)]
    vals = [np.ones(n)] + [k[:, d] for d in range(m)]
    if residual == "eps":
        rows.append(r)
        cols.append(nab + r)
        vals.append(np.ones(n))
    else:
        rows += [r, r]
        cols += [nab + r, nab + n + r]
        vals += [np.ones(n), -np.ones(n)]
    rows.append(n + eqc[0])
    cols.append(eqc[1])
    vals.append(eqc[2])
    A_eq = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(n + n_eqc, nvar))
    A_eq.sum_duplicates()
    b_eq = np.concatenate([q, np.zeros(n_eqc)])

    c = np.zeros(nvar)
    c[nab:nab + nres] = c_res
    lb = np.full(nvar, -np.inf)
    if residual != "eps":
        lb[nab:nab + nres] = 0.0
    if monotone:
        lb[n:nab] = 0.0
    layout = {"alpha": slice(0, n), "beta": slice(n, nab)}
    if residual == "eps":
        layout["eps"] = slice(nab, nab + n)
    else:
        layout["eps_plus"] = slice(nab, nab + n)
        layout["eps_minus"] = slice(nab + n, nab + 2 * n)
    if nchord:
        layout["chord"] = slice(nab + nres, nvar)
    meta = dict(meta, k=k, q=q, m=m,
                formulation="pairwise" if sorted_order is None else "sorted")
    qdiag = np.zeros(nvar)
    if Q_res is not None:
        qdiag[nab:nab + nres] = Q_res
    if gamma > 0:
        qdiag[n:nab] = 2.0 * gamma
    common = dict(c=c, A_ub=A_ub, b_ub=np.zeros(n_ub), A_eq=A_eq, b_eq=b_eq, lb=lb,
                  layout=layout, meta=meta)
    if residual == "eps" or gamma > 0 or meta.get("force_qp"):
        return QuadraticProgram(Q=sp.diags(qdiag).tocsr(), **common)
    return LinearProgram(**common)


def _order_for(k: np.ndarray, q: np.ndarray, formulation: str):
    if formulation not in ("auto", "sorted", "pairwise"):
        raise EstimationError(f"unknown formulation {formulation!r}")
    if formulation == "pairwise" or (formulation == "auto" and k.shape[1] > 1):
        return None
    if k.shape[1] > 1:
        raise EstimationError("the sorted formulation needs univariate densities")
    return _sort_order(k[:, 0], q)


# -- builders ---------------------------------------------------------------

def build_cnls(k, q, monotone: bool = False) -> QuadraticProgram:
    """CNLS with the full set of n(n-1) pairwise concavity rows.

    Minimizes the sum of squared residuals; the quadratic form is ``2 I`` on
    the residual block so that 1/2 x'Qx equals the SSE.
    """
    k, q = _prepare(k, q)
    return _assemble(k, q, sorted_order=None, residual="eps", c_res=0.0, Q_res=2.0,
                     monotone=monotone, meta={"method": Method.CNLS})


def build_cnls_univariate(k, q, monotone: bool = False) -> QuadraticProgram:
    """CNLS for univariate data already sorted ascending by (k, q).

    Uses 2(n-1) adjacent-pair rows instead of n(n-1); raises if the input is
    not sorted, since sorting is the caller's responsibility here.
    """
    k, q = _prepare(k, q)
    if k.shape[1] != 1:
        raise EstimationError("univariate formulation requires m = 1")
    k1 = k[:, 0]
    if np.any(np.diff(k1) < 0) or np.any((np.diff(k1) == 0) & (np.diff(q) < 0)):
        raise EstimationError("observations must be sorted ascending by k")
    return _assemble(k, q, sorted_order=np.arange(k1.size), residual="eps", c_res=0.0,
                     Q_res=2.0, monotone=monotone, meta={"method": Method.CNLS})


def build_cqr(k, q, tau: float, *, monotone: bool = False, formulation: str = "auto") -> LinearProgram:
    """Convex quantile regression LP.

    ``formulation="auto"`` uses the adjacent-pair rows for univariate data
    and the pairwise rows otherwise.
    """
    _check_tau(tau)
    k, q = _prepare(k, q)
    n = q.size
    c_res = np.concatenate([np.full(n, tau), np.full(n, 1.0 - tau)])
    return _assemble(k, q, sorted_order=_order_for(k, q, formulation), residual="pm",
                     c_res=c_res, monotone=monotone,
                     meta={"method": Method.CQR, "tau": tau})


def build_pcqr(k, q, tau: float, gamma: float, *, monotone: bool = False,
               formulation: str = "auto") -> QuadraticProgram:
    """CQR plus ``gamma * sum ||beta_i||^2``; gamma = 0 gives the CQR constraints exactly."""
    _check_tau(tau)
    if gamma < 0:
        raise EstimationError("gamma must be >= 0")
    k, q = _prepare(k, q)
    n = q.size
    c_res = np.concatenate([np.full(n, tau), np.full(n, 1.0 - tau)])
    return _assemble(k, q, sorted_order=_order_for(k, q, formulation), residual="pm",
                     c_res=c_res, gamma=gamma, monotone=monotone,
                     meta={"method": Method.PCQR, "tau": tau, "gamma": gamma, "force_qp": True})


def build_cqrb(bags: Sequence[Bag], tau: float, gamma: float = 0.0, *,
               formulation: str = "auto") -> QuadraticProgram:
    """Weighted penalized CQR on bag centroids.  No monotonicity constraint."""
    _check_tau(tau)
    if gamma < 0:
        raise EstimationError("gamma must be >= 0")
    if not bags:
        raise EstimationError("no bags")
    w = np.array([b.weight for b in bags])
    if abs(w.sum() - 1.0) > 1e-9:
        raise EstimationError(f"bag weights sum to {w.sum():.12g}, expected 1")
    k = np.array([b.k_centroid for b in bags])
    q = np.array([b.q_centroid for b in bags])
    k2, q = _prepare(k, q)
    c_res = np.concatenate([tau * w, (1.0 - tau) * w])
    return _assemble(k2, q, sorted_order=_order_for(k2, q, formulation), residual="pm",
                     c_res=c_res, gamma=gamma,
                     meta={"method": Method.CQRB, "tau": tau, "gamma": gamma,
                           "weights": w, "force_qp": True})


def count_constraints(n: int, method: Union[Method, str] = Method.CQR) -> dict:
    """Constraint counts of the pairwise formulation.

    Counts n regression equalities, n(n-1) concavity rows and, for the
    quantile methods, n nonnegativity pairs (one per eps+/eps- pair).
    """
    if n < 1:
        raise EstimationError("n must be >= 1")
    method = Method(method)
    nonneg = n if method.is_quantile else 0
    out = {"equality": n, "concavity": n * (n - 1), "nonneg_pairs": nonneg}
    out["total"] = out["equality"] + out["concavity"] + nonneg
    return out


# -- origin anchor ----------------------------------------------------------

def add_origin_anchor(data, weight: Optional[float] = None):
    """Add a zero-density, zero-flow point.

    ``data`` is either a sequence of :class:`Bag` or a ``(k, q)`` pair of
    arrays.  For bags the anchor counts as one synthetic observation unless
    ``weight`` gives its share explicitly; existing weights are rescaled so
    the total stays 1.  Calling twice is a no-op.
    """
    if isinstance(data, tuple) and len(data) == 2 and not isinstance(data[0], Bag):
        k, q = (np.asarray(a, dtype=float) for a in data)
        if np.any((k == 0) & (q == 0)):
            return k, q
        return np.append(k, 0.0), np.append(q, 0.0)
    bags = list(data)
    if any(b.k_centroid == 0 and b.q_centroid == 0 for b in bags):
        return bags
    n = sum(b.point_count for b in bags)
    if weight is None:
        weight = 1.0 / (n + 1)
    if not (0 < weight < 1):
        raise EstimationError("anchor weight must lie in (0, 1)")
    scale = 1.0 - weight
    out = [Bag(0.0, 0.0, weight, 1, (-1, -1))]
    out += [Bag(b.k_centroid, b.q_centroid, b.weight * scale, b.point_count, b.cell) for b in bags]
    return out


# -- curve extraction -------------------------------------------------------

def _dedupe(alpha, beta, tol_alpha, tol_beta):
    order = np.lexsort((alpha, beta))
    alpha, beta = alpha[order], beta[order]
    groups: list[list[int]] = []
    for i in range(alpha.size):
        if groups:
            j = groups[-1][0]
            if (abs(beta[i] - beta[j]) <= tol_beta * max(1.0, abs(beta[i]), abs(beta[j]))
                    and abs(alpha[i] - alpha[j]) <= tol_alpha * max(1.0, abs(alpha[i]), abs(alpha[j]))):
                groups[-1].append(i)
                continue
        groups.append([i])
    a = np.array([alpha[g].mean() for g in groups])
    b = np.array([beta[g].mean() for g in groups])
    return a, b


def lower_envelope(alpha, beta, k_lo: float, k_hi: float) -> list[Segment]:
    """Pieces of  min_j(alpha_j + beta_j k)  on [k_lo, k_hi], left to right."""
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    scale = max(1.0, abs(k_lo), abs(k_hi))
    ktol = 1e-12 * scale
    vals = alpha + beta * k_lo
    vtol = 1e-12 * max(1.0, float(np.abs(vals).max()))
    cand = np.flatnonzero(vals <= vals.min() + vtol)
    j = int(cand[np.argmin(beta[cand])])
    cur = float(k_lo)
    segments: list[Segment] = []
    while True:
        lower = beta < beta[j]
        if not lower.any():
            segments.append(Segment(float(alpha[j]), float(beta[j]), cur, float(k_hi)))
            break
        idx = np.flatnonzero(lower)
        kx = (alpha[idx] - alpha[j]) / (beta[j] - beta[idx])
        kx = np.maximum(kx, cur)
        kmin = float(kx.min())
        if kmin >= k_hi:
            segments.append(Segment(float(alpha[j]), float(beta[j]), cur, float(k_hi)))
            break
        near = idx[kx <= kmin + ktol]
        nxt = int(near[np.argmin(beta[near])])
        if kmin > cur + ktol:
            segments.append(Segment(float(alpha[j]), float(beta[j]), cur, kmin))
            cur = kmin
        j = nxt
    return segments


def curve_from_hyperplanes(alpha, beta, k_max: float, *, k_min: float = 0.0,
                           tol_alpha: float = 1e-4, tol_beta: float = 1e-4,
                           tau: Optional[float] = None, gamma: Optional[float] = None,
                           meta: Optional[dict] = None) -> PiecewiseLinearCurve:
    """Merge near-identical hyperplanes and trace their lower envelope.

    The domain runs from ``k_min`` to ``k_max``; when the last piece falls,
    the domain is extended to its zero crossing (the jam density).
    """
    alpha = np.asarray(alpha, dtype=float).ravel()
    beta = np.asarray(beta, dtype=float).ravel()
    if alpha.size == 0 or alpha.size != beta.size:
        raise CurveError("need matching, nonempty alpha and beta")
    a, b = _dedupe(alpha, beta, tol_alpha, tol_beta)
    segs = lower_envelope(a, b, k_min, k_max)
    last = segs[-1]
    if last.beta < 0:
        kj = -last.alpha / last.beta
        if kj > last.k_hi:
            segs[-1] = Segment(last.alpha, last.beta, last.k_lo, kj)
    return PiecewiseLinearCurve(tuple(segs), tau=tau, gamma=gamma, meta=dict(meta or {}))


def concave_knots(k, f, ftol: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Vertices of the least concave majorant of the points (k, f).

    A vertex within ``ftol`` of the chord joining its neighbours is dropped,
    as is every point below the majorant.  Tied densities keep the largest f.
    """
    k = np.asarray(k, dtype=float).ravel()
    f = np.asarray(f, dtype=float).ravel()
    o = np.lexsort((-f, k))
    k, f = k[o], f[o]
    keep = np.r_[True, k[1:] != k[:-1]]
    k, f = k[keep], f[keep]
    hk: list[float] = []
    hf: list[float] = []
    for ki, fi in zip(k, f):
        while len(hk) >= 2:
            k0, f0, k1, f1 = hk[-2], hf[-2], hk[-1], hf[-1]
            line = f0 + (fi - f0) * (k1 - k0) / (ki - k0)
            if f1 - line > ftol:
                break
            hk.pop()
            hf.pop()
        hk.append(float(ki))
        hf.append(float(fi))
    return np.array(hk), np.array(hf)


def canonical_hyperplanes(k, f, ftol: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """One hyperplane per chord of the concave majorant, plus end extensions.

    Outside the data the slope closest to zero that keeps the fit optimal is
    used: max(0, first chord) on the left and min(0, last chord) on the
    right.  With a ridge penalty on the slopes this is the unique optimum.
    """
    hk, hf = concave_knots(k, f, ftol)
    if hk.size == 1:
        return np.array([hf[0]]), np.array([0.0])
    slope = np.diff(hf) / np.diff(hk)
    alpha = hf[:-1] - slope * hk[:-1]
    lo = max(0.0, float(slope[0]))
    hi = min(0.0, float(slope[-1]))
    alpha = np.r_[hf[0] - lo * hk[0], alpha, hf[-1] - hi * hk[-1]]
    return alpha, np.r_[lo, slope, hi]


def extract_curve(solution: SolverSolution, problem: LinearProgram, *,
                  tol_alpha: float = 1e-4, tol_beta: float = 1e-4,
                  canonical: bool = True) -> PiecewiseLinearCurve:
    """Piecewise-linear curve from an optimal univariate estimator solution.

    Without a slope penalty the optimal slopes are not unique: a kink admits
    any slope between its neighbouring chords and the end slopes are rays.
    ``canonical=True`` rebuilds the hyperplanes from the fitted values (see
    ``canonical_hyperplanes``), which leaves every residual unchanged.
    ``canonical=False`` uses the solver's (alpha, beta) as returned.
    """
    if not solution.optimal:
        raise EstimationError(f"cannot extract a curve from a {solution.status.value} solution")
    meta = problem.meta
    if meta.get("m", 1) != 1:
        raise EstimationError("curve extraction needs univariate densities")
    x = solution.variables
    alpha = x[problem.layout["alpha"]]
    beta = x[problem.layout["beta"]]
    k = np.asarray(meta["k"]).ravel()
    if canonical:
        fitted = alpha + beta * k
        ftol = CANONICAL_FTOL * max(1.0, float(np.abs(fitted).max()))
        alpha, beta = canonical_hyperplanes(k, fitted, ftol)
    curve = curve_from_hyperplanes(
        alpha, beta, float(k.max()), tol_alpha=tol_alpha, tol_beta=tol_beta,
        tau=meta.get("tau"), gamma=meta.get("gamma"),
        meta={"method": Method(meta["method"]).value, "n": int(k.size),
              "objective": solution.objective})
    if curve.piece_count > k.size:
        raise EstimationError("more pieces than observations")
    return curve


def evaluate_curve(curve: PiecewiseLinearCurve, k, clamp: bool = False):
    """Curve value(s) at density ``k``; beyond jam density the value is negative unless clamped."""
    arr = np.asarray(k, dtype=float)
    if np.any(arr < 0):
        raise EstimationError("density must be >= 0")
    out = curve(arr)
    if clamp:
        out = np.maximum(out, 0.0)
    return float(out) if np.ndim(out) == 0 else out


# -- fitting helpers -------------------------------------------------------

@dataclass(frozen=True)
class FitResult:
    curve: PiecewiseLinearCurve
    solution: SolverSolution
    problem: LinearProgram = field(repr=False)

    @property
    def residuals(self) -> np.ndarray:
        return self.solution.residuals

    @property
    def fitted(self) -> np.ndarray:
        x = self.solution.variables
        k = np.asarray(self.problem.meta["k"])
        a = x[self.problem.layout["alpha"]]
        b = x[self.problem.layout["beta"]].reshape(k.shape)
        return a + np.sum(b * k, axis=1)


def _solve_and_extract(problem, config, tol_alpha=1e-4, tol_beta=1e-4) -> FitResult:
    sol = solve(problem, config)
    if not sol.optimal:
        raise EstimationError(f"solver finished with status {sol.status.value}: {sol.message}")
    log.info("%s fit: objective=%.6g iterations=%d", problem.meta["method"].value,
             sol.objective, sol.iterations)
    return FitResult(extract_curve(sol, problem, tol_alpha=tol_alpha, tol_beta=tol_beta), sol, problem)


def fit(k, q, spec: EstimatorSpec, config: SolverConfig = SolverConfig(), *,
        formulation: str = "auto") -> FitResult:
    """Fit CNLS, CQR or pCQR to raw (k, q) observations."""
    if spec.method is Method.CQRB:
        raise EstimationError("use fit_bags for CQRb")
    if spec.anchor_origin:
        k, q = add_origin_anchor((k, q))
    if spec.method is Method.CNLS:
        k2, q2 = _prepare(k, q)
        if formulation == "pairwise" or k2.shape[1] > 1:
            problem = build_cnls(k2, q2, spec.monotone)
        else:
            order = _sort_order(k2[:, 0], q2)
            problem = _assemble(k2, q2, sorted_order=order, residual="eps", c_res=0.0,
                                Q_res=2.0, monotone=spec.monotone,
                                meta={"method": Method.CNLS})
    elif spec.method is Method.CQR:
        problem = build_cqr(k, q, spec.tau, monotone=spec.monotone, formulation=formulation)
    else:
        problem = build_pcqr(k, q, spec.tau, spec.gamma, monotone=spec.monotone,
                             formulation=formulation)
    return _solve_and_extract(problem, config)


def fit_bags(bags: Sequence[Bag], tau: float, gamma: float = 0.0, *, anchor_origin: bool = True,
             config: SolverConfig = SolverConfig(), formulation: str = "auto") -> FitResult:
    """Fit CQRb on bag centroids, optionally adding the origin anchor first."""
    if anchor_origin:
        bags = add_origin_anchor(bags)
    return _solve_and_extract(build_cqrb(bags, tau, gamma, formulation=formulation), config)


def residual_sign_counts(residuals, q, weights=None) -> dict:
    """Mass strictly below the fit, strictly above, and at zero residual.

    ``residuals`` are q - f(k).  With weights the masses are weighted sums,
    otherwise fractions of the count.
    """
    e = np.asarray(residuals, dtype=float)
    q = np.asarray(q, dtype=float)
    w = np.full(e.size, 1.0 / e.size) if weights is None else np.asarray(weights, dtype=float)
    zero = np.abs(e) <= ZERO_RESIDUAL_TOL * (1.0 + np.abs(q))
    below = (e < 0) & ~zero
    above = (e > 0) & ~zero
    return {"below": float(w[below].sum()), "above": float(w[above].sum()),
            "zero": float(w[zero].sum())}


# -- non-crossing search ---------------------------------------------------

@dataclass(frozen=True)
class GammaSearchResult:
    gamma: float
    passed: bool
    fits: dict = field(repr=False)
    trials: tuple = ()

    @property
    def curves(self) -> dict:
        return {tau: f.curve for tau, f in self.fits.items()}


def max_crossing(curves: Mapping[float, PiecewiseLinearCurve], k_grid) -> float:
    """Largest amount by which a lower quantile curve exceeds a higher one."""
    taus = sorted(curves)
    vals = {t: curves[t](k_grid) for t in taus}
    worst = -np.inf
    for i, t1 in enumerate(taus):
        for t2 in taus[i + 1:]:
            worst = max(worst, float(np.max(vals[t1] - vals[t2])))
    return worst if taus[1:] else -np.inf


def _data_extent(data):
    if isinstance(data, tuple):
        k, q = (np.asarray(a, dtype=float) for a in data)
    else:
        k = np.array([b.k_centroid for b in data])
        q = np.array([b.q_centroid for b in data])
    return k, q


def find_min_gamma(data, taus: Sequence[float], gamma_grid: Sequence[float], *,
                   cross_tol: float = 1e-6, grid_points: int = 1000,
                   anchor_origin: Optional[bool] = None,
                   config: SolverConfig = SolverConfig()) -> GammaSearchResult:
    """Smallest grid gamma whose quantile fits do not cross.

    ``data`` is a sequence of bags (CQRb) or a ``(k, q)`` pair (pCQR).  The
    crossing tolerance is ``cross_tol`` times the flow range, checked on
    ``grid_points`` equispaced densities over the data range.  If no grid
    value qualifies the largest one is returned with ``passed=False``.
    """
    taus = list(taus)
    grid = list(gamma_grid)
    if not taus or not grid:
        raise EstimationError("taus and gamma_grid must be nonempty")
    if any(b <= a for a, b in zip(taus, taus[1:])):
        raise EstimationError("taus must be strictly ascending")
    for t in taus:
        _check_tau(t)
    if any(b < a for a, b in zip(grid, grid[1:])) or grid[0] < 0:
        raise EstimationError("gamma_grid must be ascending and nonnegative")
    bagged = not isinstance(data, tuple)
    if anchor_origin is None:
        anchor_origin = bagged
    k, q = _data_extent(data)
    k_grid = np.linspace(k.min(), k.max(), max(grid_points, 1000))
    tol = cross_tol * max(float(q.max() - q.min()), 1e-300)

    def fit_all(gamma):
        out = {}
        for t in taus:
            if bagged:
                out[t] = fit_bags(data, t, gamma, anchor_origin=anchor_origin, config=config)
            else:
                spec = EstimatorSpec(Method.PCQR, tau=t, gamma=gamma, anchor_origin=anchor_origin)
                out[t] = fit(data[0], data[1], spec, config)
        return out

    trials = []
    fits = {}
    for gamma in grid:
        fits = fit_all(gamma)
        if len(taus) == 1:
            return GammaSearchResult(float(gamma), True, fits, ((gamma, -np.inf),))
        worst = max_crossing({t: f.curve for t, f in fits.items()}, k_grid)
        trials.append((gamma, worst))
        if worst <= tol:
            return GammaSearchResult(float(gamma), True, fits, tuple(trials))
    log.warning("no gamma in the grid removes quantile crossing; returning %g", grid[-1])
    return GammaSearchResult(float(grid[-1]), False, fits, tuple(trials))


# -- serialization ----------------------------------------------------------

def curve_to_text(curve: PiecewiseLinearCurve) -> str:
    """One ``alpha beta k_lo k_hi`` line per piece; header comments carry tau and gamma."""
    lines = []
    if curve.tau is not None:
        lines.append(f"# tau={curve.tau!r}")
    if curve.gamma is not None:
        lines.append(f"# gamma={curve.gamma!r}")
    for s in curve.segments:
        lines.append(f"{s.alpha!r} {s.beta!r} {s.k_lo!r} {s.k_hi!r}")
    return "\n".join(lines) + "\n"


def curve_from_text(text: str) -> PiecewiseLinearCurve:
    rows, header = [], {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, sep, value = line[1:].strip().partition("=")
            if sep and key.strip() in ("tau", "gamma"):
                header[key.strip()] = float(value)
            continue
        parts = line.split()
        if len(parts) != 4:
            raise CurveError(f"line {lineno}: expected 4 fields, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise CurveError(f"line {lineno}: {exc}") from None
    return PiecewiseLinearCurve.from_table(rows, **header)


def _jsonable(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Enum):
        return value.value
    return value


def curve_to_json(curve: PiecewiseLinearCurve, **extra) -> str:
    doc = {
        "tau": curve.tau,
        "gamma": curve.gamma,
        "segments": [[s.alpha, s.beta, s.k_lo, s.k_hi] for s in curve.segments],
        "meta": {k: _jsonable(v) for k, v in {**curve.meta, **extra}.items()},
    }
    return json.dumps(doc, indent=2)


def curve_from_json(text: str) -> PiecewiseLinearCurve:
    doc = json.loads(text)
    return PiecewiseLinearCurve.from_table(doc["segments"], tau=doc.get("tau"),
                                           gamma=doc.get("gamma"), meta=doc.get("meta") or {})


def concavity_violation(curve: PiecewiseLinearCurve, rng: np.random.Generator,
                        samples: int = 1000) -> float:
    """Largest midpoint-inequality violation over random triples in the domain."""
    lo, hi = curve.k_lo, curve.k_hi
    k1 = rng.uniform(lo, hi, samples)
    k2 = rng.uniform(lo, hi, samples)
    lam = rng.uniform(0, 1, samples)
    lhs = curve(lam * k1 + (1 - lam) * k2)
    rhs = lam * curve(k1) + (1 - lam) * curve(k2)
    return float(np.max(rhs - lhs))
