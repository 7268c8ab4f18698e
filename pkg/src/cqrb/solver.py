"""Primal-dual interior-point solver for sparse LPs and convex QPs.

Problems are stated as

    minimize    1/2 x'Qx + c'x
    subject to  A_ub x <= b_ub
                A_eq x == b_eq
                x >= lb            (lb entries may be -inf)

and solved with Mehrotra's predictor-corrector method on the reduced
(augmented) Newton system, factorized with SuperLU each iteration.  The
problem is Ruiz-equilibrated before solving; all stopping tests are made on
the unscaled problem.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .core import SolverSolution, SolverStatus

log = logging.getLogger(__name__)


class ProblemError(ValueError):
    """Inconsistent or invalid optimization problem description."""


@dataclass(frozen=True)
class SolverConfig:
    feasibility_tol: float = 1e-8
    optimality_tol: float = 1e-8
    kkt_tol: float = 1e-6
    max_iter: int = 200
    scale: bool = True
    # re-solve the identified active set exactly after convergence
    polish: bool = True
    # step-to-boundary fraction
    step_fraction: float = 0.99


def _as_csr(A, ncols: int) -> sp.csr_matrix:
    if A is None:
        return sp.csr_matrix((0, ncols))
    A = sp.csr_matrix(A, dtype=float)
    if A.shape[1] != ncols:
        raise ProblemError(f"constraint matrix has {A.shape[1]} columns, expected {ncols}")
    return A


def _as_vec(b, size: int, name: str) -> np.ndarray:
    if b is None:
        b = np.zeros(size)
    b = np.asarray(b, dtype=float).ravel()
    if b.size != size:
        raise ProblemError(f"{name} has length {b.size}, expected {size}")
    return b


@dataclass(frozen=True, eq=False)
class LinearProgram:
    c: np.ndarray
    A_ub: Optional[sp.spmatrix] = None
    b_ub: Optional[np.ndarray] = None
    A_eq: Optional[sp.spmatrix] = None
    b_eq: Optional[np.ndarray] = None
    lb: Optional[np.ndarray] = None
    layout: Mapping[str, slice] = field(default_factory=dict)
    meta: Mapping = field(default_factory=dict)

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float).ravel()
        n = c.size
        A_ub = _as_csr(self.A_ub, n)
        A_eq = _as_csr(self.A_eq, n)
        b_ub = _as_vec(self.b_ub, A_ub.shape[0], "b_ub")
        b_eq = _as_vec(self.b_eq, A_eq.shape[0], "b_eq")
        lb = np.full(n, -np.inf) if self.lb is None else _as_vec(self.lb, n, "lb")
        for name, arr in (("c", c), ("b_ub", b_ub), ("b_eq", b_eq),
                          ("A_ub", A_ub.data), ("A_eq", A_eq.data)):
            if not np.all(np.isfinite(arr)):
                raise ProblemError(f"{name} contains non-finite values")
        if np.any(np.isnan(lb)) or np.any(lb == np.inf):
            raise ProblemError("lower bounds must be finite or -inf")
        for name, value in (("c", c), ("A_ub", A_ub), ("b_ub", b_ub),
                            ("A_eq", A_eq), ("b_eq", b_eq), ("lb", lb)):
            object.__setattr__(self, name, value)

    @property
    def n_vars(self) -> int:
        return self.c.size

    @property
    def n_ub(self) -> int:
        return self.A_ub.shape[0]

    @property
    def n_eq(self) -> int:
        return self.A_eq.shape[0]

    def objective(self, x: np.ndarray) -> float:
        return float(self.c @ x)


@dataclass(frozen=True, eq=False)
class QuadraticProgram(LinearProgram):
    Q: Optional[sp.spmatrix] = None

    def __post_init__(self):
        super().__post_init__()
        n = self.c.size
        Q = sp.csr_matrix((n, n)) if self.Q is None else sp.csr_matrix(self.Q, dtype=float)
        if Q.shape != (n, n):
            raise ProblemError(f"Q has shape {Q.shape}, expected {(n, n)}")
        if not np.all(np.isfinite(Q.data)):
            raise ProblemError("Q contains non-finite values")
        object.__setattr__(self, "Q", Q)

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ (self.Q @ x) + self.c @ x)


def check_psd(Q: sp.spmatrix, tol: float = 1e-8) -> None:
    """Raise ProblemError unless Q is symmetric positive semidefinite."""
    Q = sp.csr_matrix(Q)
    n = Q.shape[0]
    if n == 0 or Q.nnz == 0:
        return
    qmax = max(1.0, float(abs(Q).max()))
    asym = abs(Q - Q.T)
    if asym.nnz and asym.max() > 1e-12 * qmax:
        raise ProblemError("Q is not symmetric")
    offdiag = Q - sp.diags(Q.diagonal())
    offdiag.eliminate_zeros()
    if offdiag.nnz == 0:
        lam_min = float(Q.diagonal().min())
    elif n <= 2000:
        lam_min = float(np.linalg.eigvalsh(Q.toarray()).min())
    else:
        lam_min = float(spla.eigsh(Q.astype(float), k=1, which="SA",
                                   return_eigenvectors=False)[0])
    if lam_min < -tol * qmax:
        raise ProblemError(f"Q is not positive semidefinite (min eigenvalue {lam_min:.3g})")


def solve_lp(problem: LinearProgram, config: SolverConfig = SolverConfig()) -> SolverSolution:
    """Solve a linear program; see module docstring for the form."""
    return _solve(problem, None, config)


def solve_qp(problem: QuadraticProgram, config: SolverConfig = SolverConfig()) -> SolverSolution:
    """Solve a convex QP.  A non-PSD ``Q`` raises ProblemError before any iteration."""
    check_psd(problem.Q)
    Q = problem.Q if problem.Q.nnz else None
    return _solve(problem, Q, config)


def solve(problem: LinearProgram, config: SolverConfig = SolverConfig()) -> SolverSolution:
    """Dispatch on problem type."""
    if isinstance(problem, QuadraticProgram):
        return solve_qp(problem, config)
    return solve_lp(problem, config)


def _solve(problem: LinearProgram, Q, config: SolverConfig) -> SolverSolution:
    res = _InteriorPoint(Q, problem.c, problem.A_ub, problem.b_ub, problem.A_eq,
                         problem.b_eq, problem.lb, config).run()
    x = res["x"]
    objective = problem.objective(x) if x is not None else float("nan")
    plus = minus = None
    layout = problem.layout
    if x is not None:
        if "eps_plus" in layout:
            plus = np.maximum(x[layout["eps_plus"]], 0.0)
            minus = np.maximum(x[layout["eps_minus"]], 0.0)
        elif "eps" in layout:
            eps = x[layout["eps"]]
            plus, minus = np.maximum(eps, 0.0), np.maximum(-eps, 0.0)
    return SolverSolution(
        objective=objective,
        variables=x if x is not None else np.full(problem.n_vars, np.nan),
        status=res["status"],
        residuals_plus=plus,
        residuals_minus=minus,
        iterations=res["iterations"],
        message=res["message"],
        duals=res["duals"],
    )


def _absmax(A: sp.csr_matrix, axis: int, size: int) -> np.ndarray:
    if A.nnz == 0:
        return np.zeros(size)
    return np.asarray(abs(A).max(axis=axis).todense()).ravel()


def _ruiz(Q, G, E, n, iters=15):
    D = np.ones(n)
    R1 = np.ones(G.shape[0])
    R2 = np.ones(E.shape[0])
    for _ in range(iters):
        Gs = sp.diags(R1) @ G @ sp.diags(D)
        Es = sp.diags(R2) @ E @ sp.diags(D)
        col = np.maximum(_absmax(Gs, 0, n), _absmax(Es, 0, n))
        if Q is not None:
            col = np.maximum(col, _absmax(sp.diags(D) @ Q @ sp.diags(D), 0, n))
        rg = _absmax(Gs, 1, G.shape[0])
        re = _absmax(Es, 1, E.shape[0])
        col[col == 0] = 1.0
        rg[rg == 0] = 1.0
        re[re == 0] = 1.0
        if max(abs(col - 1).max(initial=0), abs(rg - 1).max(initial=0),
               abs(re - 1).max(initial=0)) < 1e-3:
            break
        D = np.clip(D / np.sqrt(col), 1e-6, 1e6)
        R1 = np.clip(R1 / np.sqrt(rg), 1e-6, 1e6)
        R2 = np.clip(R2 / np.sqrt(re), 1e-6, 1e6)
    return D, R1, R2


class _Factorization:
    """LU of the regularized KKT matrix with refinement against the exact one.

    The symmetric minimum-degree ordering without pivoting keeps fill linear
    on the quasi-definite systems produced here; if refinement cannot bring
    the residual down, the matrix is refactored with partial pivoting.
    """

    def __init__(self, K, K0):
        self.K, self.K0 = K, K0
        self.pivoted = False
        self.lu = spla.splu(K, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                            options={"SymmetricMode": True})

    def _refined(self, rhs):
        sol = self.lu.solve(rhs)
        r = rhs - self.K0 @ sol
        rn = np.abs(r).max(initial=0)
        for _ in range(6):
            if rn <= 1e-15 * (1 + np.abs(rhs).max(initial=0)):
                break
            trial = sol + self.lu.solve(r)
            rt = rhs - self.K0 @ trial
            rtn = np.abs(rt).max(initial=0)
            if rtn >= rn:
                break
            sol, r, rn = trial, rt, rtn
        return sol, rn

    def solve(self, rhs):
        sol, rn = self._refined(rhs)
        ok = np.isfinite(rn) and rn <= 1e-9 * (1 + np.abs(rhs).max(initial=0))
        if not ok and not self.pivoted:
            self.pivoted = True
            self.lu = spla.splu(self.K, permc_spec="COLAMD", diag_pivot_thresh=0.1)
            sol, rn = self._refined(rhs)
        return sol


class _InteriorPoint:
    """One solve.  Single use; not thread-safe."""

    reg_primal = 1e-10
    reg_dual = 1e-10
    max_correctors = 3
    dense_polish_limit = 3000

    def __init__(self, Q, c, G, h, E, f, lb, config: SolverConfig):
        self.cfg = config
        self.n = n = c.size
        self.Q0, self.c0, self.G0, self.h0, self.E0, self.f0, self.lb0 = Q, c, G, h, E, f, lb
        if config.scale:
            D, R1, R2 = _ruiz(Q, G, E, n)
        else:
            D, R1, R2 = np.ones(n), np.ones(G.shape[0]), np.ones(E.shape[0])
        bidx = np.flatnonzero(np.isfinite(lb))
        mags = [1.0]
        for arr in (R1 * h, R2 * f, lb[bidx] / D[bidx]):
            if arr.size:
                mags.append(float(np.abs(arr).max()))
        bscale = max(mags)
        D = D * bscale
        R1 = R1 / bscale
        R2 = R2 / bscale
        self.D, self.R1, self.R2 = D, R1, R2
        self.G = (sp.diags(R1) @ G @ sp.diags(D)).tocsr()
        self.E = (sp.diags(R2) @ E @ sp.diags(D)).tocsr()
        self.h = R1 * h
        self.f = R2 * f
        self.bidx = bidx
        self.l = lb[bidx] / D[bidx]
        cq = D * c
        Qs = None if Q is None else (sp.diags(D) @ Q @ sp.diags(D)).tocsr()
        cmax = float(np.abs(cq).max(initial=0.0))
        qmax = 0.0 if Qs is None or Qs.nnz == 0 else float(abs(Qs).max())
        big = max(cmax, qmax)
        self.cs = 1.0 / big if big > 0 else 1.0
        self.c = self.cs * cq
        self.Q = None if Qs is None else self.cs * Qs
        self.hnorm = max(1.0, float(np.abs(h).max(initial=0)), float(np.abs(f).max(initial=0)))
        self.cnorm = 1.0 + float(np.abs(c).max(initial=0))

    # -- helpers on the scaled problem --------------------------------------
    def _Qx(self, x):
        return np.zeros_like(x) if self.Q is None else self.Q @ x

    def _unscale(self, x, lam, y, z):
        xo = self.D * x
        lamo = self.R1 * lam / self.cs
        yo = self.R2 * y / self.cs
        zo = z / (self.D[self.bidx] * self.cs)
        return xo, lamo, yo, zo

    def _measures(self, x, lam, y, z):
        xo, lamo, yo, zo = self._unscale(x, lam, y, z)
        G, E = self.G0, self.E0
        Qx = np.zeros_like(xo) if self.Q0 is None else self.Q0 @ xo
        pviol = 0.0
        if G.shape[0]:
            pviol = max(pviol, float(np.max(G @ xo - self.h0, initial=0.0)))
        if E.shape[0]:
            pviol = max(pviol, float(np.abs(E @ xo - self.f0).max()))
        if self.bidx.size:
            pviol = max(pviol, float(np.max(self.lb0[self.bidx] - xo[self.bidx], initial=0.0)))
        rd = Qx + self.c0 + G.T @ lamo + E.T @ yo
        rd[self.bidx] -= zo
        dres = float(np.abs(rd).max(initial=0.0)) / (self.cnorm + float(np.abs(Qx).max(initial=0)))
        xQx = float(xo @ Qx)
        pobj = 0.5 * xQx + float(self.c0 @ xo)
        dobj = -0.5 * xQx - float(self.h0 @ lamo) - float(self.f0 @ yo) + float(self.lb0[self.bidx] @ zo)
        gap = abs(pobj - dobj) / (1.0 + abs(pobj))
        return pviol / self.hnorm, dres, gap, (xo, lamo, yo, zo)

    def _kkt(self, sl, d, boost=1.0):
        """Quasi-definite augmented matrix over (x, lam, y).

        ``sl`` is s/lam for the inequality rows; bound multipliers are
        eliminated into the diagonal ``d`` = z/t.
        """
        n, mi, me = self.n, self.G.shape[0], self.E.shape[0]
        H = sp.csr_matrix((n, n)) if self.Q is None else self.Q.copy()
        dd = np.zeros(n)
        dd[self.bidx] = d
        H = H + sp.diags(dd + self.reg_primal * boost)
        rd = self.reg_dual * boost
        blocks = [[H, self.G.T if mi else None, self.E.T if me else None]]
        if mi:
            blocks.append([self.G, -sp.diags(sl + rd), None])
        if me:
            blocks.append([self.E, None, -rd * sp.eye(me)])
        return sp.bmat(blocks, format="csc")

    def run(self) -> dict:
        cfg = self.cfg
        n, G, E, h, f, bidx, l = self.n, self.G, self.E, self.h, self.f, self.bidx, self.l
        mi, me, nb = G.shape[0], E.shape[0], bidx.size
        m = mi + nb
        lp = self.Q is None

        # starting point: regularized least-squares fit of the constraints
        try:
            K = self._kkt(np.ones(mi), np.ones(nb))
            lu = _Factorization(K, K)
            rhs = -self.c.copy()
            rhs[bidx] += l
            x = lu.solve(np.concatenate([rhs, h, f]))[:n]
        except RuntimeError:
            x = np.zeros(n)
        # Mehrotra-style shift into the interior
        s = h - G @ x
        t = x[bidx] - l
        slack = np.concatenate([s, t])
        lam = np.ones(mi)
        z = np.ones(nb)
        y = np.zeros(me)
        if m:
            slack = slack + max(-1.5 * float(slack.min()), 0.0)
            slack = slack + max(0.5 * float(slack.sum()) / m, 1e-2)
            s, t = slack[:mi], slack[mi:]
            x[bidx] = l + t

        status = SolverStatus.ITERATION_LIMIT
        message = "iteration limit reached"
        stalls = 0
        it = 0
        for it in range(cfg.max_iter + 1):
            t = x[bidx] - l
            if not (np.all(np.isfinite(x)) and np.all(np.isfinite(lam))
                    and np.all(np.isfinite(y)) and np.all(np.isfinite(z))):
                status, message = SolverStatus.NUMERIC_FAILURE, "non-finite iterate"
                break
            pres, dres, gap, orig = self._measures(x, lam, y, z)
            dtol = cfg.feasibility_tol if self.Q is None else min(cfg.kkt_tol, cfg.feasibility_tol)
            if pres <= cfg.feasibility_tol and dres <= dtol and gap <= cfg.optimality_tol:
                status, message = SolverStatus.OPTIMAL, "converged"
                break
            if it == cfg.max_iter:
                break
            if self._primal_infeasible(lam, y, z):
                status, message = SolverStatus.INFEASIBLE, "primal infeasible (Farkas certificate)"
                break
            if float(np.abs(x).max(initial=0)) > 1e12:
                status, message = SolverStatus.INFEASIBLE, "dual infeasible (objective unbounded)"
                break

            Qx = self._Qx(x)
            rd = Qx + self.c + G.T @ lam + E.T @ y
            rd[bidx] -= z
            rpi = G @ x + s - h
            rpe = E @ x - f
            mu = (s @ lam + t @ z) / m if m else 0.0

            sl = s / lam if mi else np.zeros(0)
            d = z / t if nb else np.zeros(0)
            K0 = self._kkt(sl, d, boost=0.0)
            lu = None
            for boost in (1.0, 1e2, 1e4, 1e6):
                try:
                    lu = _Factorization(self._kkt(sl, d, boost=boost), K0)
                    break
                except RuntimeError:
                    continue
            if lu is None:
                status, message = SolverStatus.NUMERIC_FAILURE, "singular Newton system"
                break

            def newton(rc1, rc2):
                rx = -rd.copy()
                if nb:
                    rx[bidx] -= rc2 / t
                rl = -rpi + rc1 / lam if mi else np.zeros(0)
                rhs = np.concatenate([rx, rl, -rpe])
                sol = lu.solve(rhs)
                dx, dlam, dy = sol[:n], sol[n:n + mi], sol[n + mi:]
                ds = -rpi - G @ dx
                dz = (-rc2 - z * dx[bidx]) / t if nb else np.zeros(0)
                return dx, dy, ds, dlam, dz

            if m == 0:
                dx, dy, ds, dlam, dz = newton(np.zeros(0), np.zeros(0))
                x, y = x + dx, y + dy
                continue

            dx, dy, ds, dlam, dz = newton(s * lam, t * z)
            ap, ad = self._steps(s, ds, lam, dlam, t, dx[bidx], z, dz, lp)
            mu_aff = ((s + ap * ds) @ (lam + ad * dlam)
                      + (t + ap * dx[bidx]) @ (z + ad * dz)) / m
            sigma = min(1.0, (mu_aff / mu) ** 3) if mu > 0 else 0.0
            rc1 = s * lam + ds * dlam - sigma * mu
            rc2 = t * z + dx[bidx] * dz - sigma * mu
            dx, dy, ds, dlam, dz = newton(rc1, rc2)
            ap, ad = self._steps(s, ds, lam, dlam, t, dx[bidx], z, dz, lp)

            # centrality correctors: pull outlying products toward sigma*mu
            target = sigma * mu
            for _ in range(self.max_correctors):
                ap_t, ad_t = min(1.0, 1.5 * ap + 0.1), min(1.0, 1.5 * ad + 0.1)
                v = np.concatenate([(s + ap_t * ds) * (lam + ad_t * dlam),
                                    (t + ap_t * dx[bidx]) * (z + ad_t * dz)])
                vt = np.clip(v, 0.1 * target, 10.0 * target)
                corr = np.maximum(vt - v, -10.0 * target)
                cand = newton(rc1 - corr[:mi], rc2 - corr[mi:])
                cap, cad = self._steps(s, cand[2], lam, cand[3], t, cand[0][bidx], z, cand[4], lp)
                if min(cap, cad) < 1.01 * min(ap, ad):
                    break
                dx, dy, ds, dlam, dz = cand
                rc1, rc2 = rc1 - corr[:mi], rc2 - corr[mi:]
                ap, ad = cap, cad
                if min(ap, ad) >= 1.0:
                    break
            ap = min(1.0, cfg.step_fraction * ap)
            ad = min(1.0, cfg.step_fraction * ad)
            if min(ap, ad) < 1e-10:
                stalls += 1
                if stalls >= 5:
                    status, message = SolverStatus.NUMERIC_FAILURE, "step length collapsed"
                    break
            else:
                stalls = 0
            x = x + ap * dx
            s = s + ap * ds
            y = y + ad * dy
            lam = lam + ad * dlam
            z = z + ad * dz
            if mi:
                s = np.maximum(s, 1e-300)
                lam = np.maximum(lam, 1e-300)
            if nb:
                x[bidx] = np.maximum(x[bidx], l + 1e-300)
                z = np.maximum(z, 1e-300)

        if status is SolverStatus.OPTIMAL and cfg.polish and m:
            self._last_y = y
            polished = self._polish(x, s, lam, t, z)
            if polished is not None:
                x, lam, y, z = polished
                message = "converged (polished)"
        _, _, _, (xo, lamo, yo, zo) = self._measures(x, lam, y, z)
        log.debug("ipm %s after %d iterations", status.value, it)
        zfull = np.zeros(n)
        zfull[bidx] = zo
        ok = status is not SolverStatus.NUMERIC_FAILURE or np.all(np.isfinite(xo))
        return {
            "x": xo if ok else None,
            "status": status,
            "iterations": it,
            "message": message,
            "duals": {"ineqlin": lamo, "eqlin": yo, "lower": zfull},
        }

    def _polish(self, x, s, lam, t, z):
        """Solve the KKT equations of the guessed active set; None if that fails.

        A row starts active when its slack is below its multiplier; rows the
        equality solve violates are added and the solve repeated.  The point
        is kept only if, with its own multipliers or the interior-point ones,
        it meets the stopping tests again.  The sparse factorization is tried
        first; small systems fall back to dense least squares, which copes
        with degenerate active sets.
        """
        out = self._polish_with(x, s, lam, t, z, dense=False)
        exact = out is not None and out[1]
        if not exact and self.n + self.G.shape[0] + self.E.shape[0] <= self.dense_polish_limit:
            out = self._polish_with(x, s, lam, t, z, dense=True) or out
        return None if out is None else out[0]

    def _polish_with(self, x, s, lam, t, z, dense):
        n, G, E, bidx = self.n, self.G, self.E, self.bidx
        act = s < lam
        bmask = t < z
        H = sp.csr_matrix((n, n)) if self.Q is None else self.Q
        for _ in range(8):
            rows = np.flatnonzero(act)
            bact = np.flatnonzero(bmask)
            fix = sp.csr_matrix((np.ones(bact.size), (np.arange(bact.size), bidx[bact])),
                                shape=(bact.size, n))
            A = sp.vstack([G[rows], E, fix], format="csr")
            # solve for the step from the interior point so that directions
            # the active set leaves free stay where the iterate put them
            rhs = np.concatenate([-self.c - self._Qx(x), self.h[rows] - G[rows] @ x,
                                  self.f - E @ x, self.l[bact] - x[bidx[bact]]])
            na = A.shape[0]
            K0 = sp.bmat([[H, A.T], [A, sp.csr_matrix((na, na))]], format="csc")
            try:
                if dense:
                    sol = sla.lstsq(K0.toarray(), rhs, lapack_driver="gelsy")[0]
                else:
                    sol = self._regularized_solve(H, A, K0, rhs)
            except (RuntimeError, ValueError, sla.LinAlgError) as exc:
                log.debug("polish solve failed: %s", exc)
                return None
            if not np.all(np.isfinite(sol)):
                log.debug("polish solve gave non-finite values")
                return None
            resid = float(np.abs(K0 @ sol - rhs).max(initial=0))
            xp = x + sol[:n]
            viol = ~act & (G @ xp - self.h > 1e-12 * (1.0 + np.abs(self.h)))
            bviol = ~bmask & (self.l - xp[bidx] > 1e-12 * (1.0 + np.abs(self.l)))
            if not (viol.any() or bviol.any()):
                break
            act |= viol
            bmask |= bviol
        else:
            log.debug("polish rejected: active set did not settle")
            return None
        exact = resid <= 1e-11 * (1.0 + float(np.abs(rhs).max(initial=0)))
        mult = sol[n:]
        lam_p = np.zeros_like(lam)
        lam_p[rows] = mult[:rows.size]
        y_p = mult[rows.size:rows.size + E.shape[0]]
        z_p = np.zeros_like(z)
        z_p[bact] = -mult[rows.size + E.shape[0]:]
        sign_tol = 1e-9 * max(1.0, float(np.abs(mult).max(initial=0)))
        candidates = [(lam, self._last_y, z)]
        if not (np.any(lam_p < -sign_tol) or np.any(z_p < -sign_tol)):
            candidates.insert(0, (np.maximum(lam_p, 0.0), y_p, np.maximum(z_p, 0.0)))
        cfg = self.cfg
        dtol = cfg.feasibility_tol if self.Q is None else min(cfg.kkt_tol, cfg.feasibility_tol)
        # the polished point may not buy objective with constraint violation
        ptol = min(cfg.feasibility_tol, max(self._measures(x, lam, self._last_y, z)[0], 1e-13))
        for lam_c, y_c, z_c in candidates:
            pres, dres, gap, _ = self._measures(xp, lam_c, y_c, z_c)
            if pres <= ptol and dres <= dtol and gap <= cfg.optimality_tol:
                return (xp, lam_c, y_c, z_c), exact
        # a feasible point no worse than the converged iterate inherits the
        # iterate's dual bound, even when its own multipliers are not unique
        obj = lambda v: 0.5 * v @ self._Qx(v) + self.c @ v
        if pres <= ptol and obj(xp) <= obj(x) + 1e-14 * abs(obj(x)):
            return (xp, lam, self._last_y, z), exact
        log.debug("polish rejected (%s): pres=%.3g dres=%.3g gap=%.3g",
                  "dense" if dense else "sparse", pres, dres, gap)
        return None

    @staticmethod
    def _regularized_solve(H, A, K0, rhs):
        n, na = H.shape[0], A.shape[0]
        for delta in (1e-9, 1e-7, 1e-5):
            K = sp.bmat([[H + delta * sp.eye(n), A.T], [A, -delta * sp.eye(na)]], format="csc")
            try:
                return _Factorization(K, K0).solve(rhs)
            except RuntimeError:
                continue
        raise RuntimeError("regularized KKT matrix is singular")

    @staticmethod
    def _max_step(pairs) -> float:
        a = 1.0
        for v, dv in pairs:
            neg = dv < 0
            if np.any(neg):
                a = min(a, float(np.min(-v[neg] / dv[neg])))
        return a

    def _steps(self, s, ds, lam, dlam, t, dt, z, dz, separate):
        ap = self._max_step(((s, ds), (t, dt)))
        ad = self._max_step(((lam, dlam), (z, dz)))
        if not separate:
            ap = ad = min(ap, ad)
        return ap, ad

    def _primal_infeasible(self, lam, y, z) -> bool:
        scale = max(np.abs(lam).max(initial=0), np.abs(y).max(initial=0), np.abs(z).max(initial=0))
        if scale < 1e6:
            return False
        bt = float(self.h @ lam + self.f @ y - self.l @ z)
        if bt >= 0:
            return False
        r = self.G.T @ lam + self.E.T @ y
        r[self.bidx] -= z
        return float(np.abs(r).max(initial=0)) <= 1e-6 * abs(bt)
