import itertools

import numpy as np
import pytest

from cqrb import core

# Every curve constructed during the run is recorded here so the concavity
# check at the end of the session can look at all of them.
CURVES = []

_orig_post_init = core.PiecewiseLinearCurve.__post_init__


def _recording_post_init(self):
    _orig_post_init(self)
    CURVES.append(self)


core.PiecewiseLinearCurve.__post_init__ = _recording_post_init


def pytest_collection_modifyitems(session, config, items):
    last = [it for it in items if it.get_closest_marker("runs_last")]
    items[:] = [it for it in items if it not in last] + last


def pytest_configure(config):
    config.addinivalue_line("markers", "runs_last: run after every other test")


# hyperplanes (alpha, beta) of a reference six-piece CNLS curve
SIX_PIECE_PLANES = [(45.12, 76.88), (864.03, 55.48), (3910.85, 15.37), (4951.16, 2.93),
              (6644.69, -16.91), (7306.55, -24.34)]
SIX_PIECE_BREAKS = [38.29, 75.93, 83.54, 85.29, 89.07]
SIX_PIECE_KMAX = 300.19

# (alpha, beta, k_lo, k_hi) rows of a reference twelve-piece CQRb curve
TWELVE_PIECE_ROWS = [
    (0.0, 79.95, 0.0, 7.35),
    (33.10, 75.45, 7.35, 9.02),
    (84.14, 69.79, 9.02, 17.13),
    (84.37, 69.78, 17.13, 18.57),
    (104.97, 68.67, 18.57, 21.54),
    (375.51, 56.11, 21.54, 24.63),
    (429.21, 53.93, 24.63, 28.06),
    (807.74, 40.44, 28.06, 30.89),
    (1543.74, 16.61, 30.89, 34.02),
    (2585.99, -14.03, 34.02, 36.14),
    (2683.16, -16.71, 36.14, 56.33),
    (2988.56, -22.14, 56.33, 135.01),
]


@pytest.fixture
def twelve_piece_curve():
    return core.PiecewiseLinearCurve.from_table(TWELVE_PIECE_ROWS)


@pytest.fixture
def six_piece_curve():
    from cqrb.estimators import curve_from_hyperplanes
    a, b = map(np.array, zip(*SIX_PIECE_PLANES))
    return curve_from_hyperplanes(a, b, SIX_PIECE_KMAX)


def concave_projection_oracle(k, q):
    """Least-squares concave fit of sorted, distinct univariate data by brute force.

    Enumerates every subset of the n - 2 adjacent slope constraints as the
    active set, projects onto the corresponding equality subspace and keeps
    the best primal-feasible candidate.  The true active set is among the
    candidates and its projection is the optimum, so the minimum over
    feasible candidates is exact.
    """
    k = np.asarray(k, float)
    q = np.asarray(q, float)
    n = k.size
    # row i: slope(i, i+1) - slope(i+1, i+2) >= 0
    D = np.zeros((n - 2, n))
    for i in range(n - 2):
        h1, h2 = k[i + 1] - k[i], k[i + 2] - k[i + 1]
        D[i, i] = -1 / h1
        D[i, i + 1] = 1 / h1 + 1 / h2
        D[i, i + 2] = -1 / h2
    best = (np.inf, None)
    for r in range(n - 1):
        for act in itertools.combinations(range(n - 2), r):
            if act:
                A = D[list(act)]
                # projection of q onto {f : A f = 0}
                f = q - A.T @ np.linalg.solve(A @ A.T, A @ q)
            else:
                f = q.copy()
            if np.all(D @ f >= -1e-9):
                sse = float(np.sum((f - q) ** 2))
                if sse < best[0]:
                    best = (sse, f)
    return best


# one line per acceptance criterion, filled in by test_acceptance
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[num])
