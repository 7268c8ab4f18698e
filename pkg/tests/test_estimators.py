import logging

import numpy as np
import pytest

from cqrb.core import Bag, CurveError, PiecewiseLinearCurve, SolverSolution, SolverStatus
from cqrb import estimators as E
from cqrb.solver import solve

from conftest import SIX_PIECE_BREAKS, concave_projection_oracle


def _fitted(problem, sol):
    x = sol.variables
    return x[problem.layout["alpha"]] + x[problem.layout["beta"]] * np.asarray(problem.meta["k"])[:, 0]


def _noisy_concave(n, seed, sigma=0.3):
    rng = np.random.default_rng(seed)
    k = rng.uniform(0.5, 10, n)
    q = np.minimum(3 * k, 12 + 0.5 * (k - 4)) - 0.1 * (k - 5) ** 2
    return k, q + sigma * (1 + k / 5) * rng.standard_normal(n)


# -- CNLS -------------------------------------------------------------------

def test_cnls_two_points_interpolates():
    p = E.build_cnls([0.0, 1.0], [0.0, 1.0])
    sol = solve(p)
    assert sol.optimal
    assert sol.objective == pytest.approx(0.0, abs=1e-8)


@pytest.mark.parametrize("builder", [E.build_cnls, E.build_cnls_univariate])
def test_cnls_three_points(builder):
    p = builder([0.0, 1.0, 2.0], [0.0, 0.0, 1.0])
    sol = solve(p)
    np.testing.assert_allclose(_fitted(p, sol), [-1 / 6, 1 / 3, 5 / 6], atol=1e-6)
    assert sol.objective == pytest.approx(1 / 6, abs=1e-7)


@pytest.mark.parametrize("builder", [E.build_cnls, E.build_cnls_univariate])
def test_cnls_concave_data_zero_sse(builder):
    k = np.linspace(0, 10, 15)
    q = np.minimum(5 * k, 30 - k)
    sol = solve(builder(k, q))
    assert sol.objective == pytest.approx(0.0, abs=1e-7)


def test_cnls_matches_active_set_oracle():
    rng = np.random.default_rng(11)
    for n in (3, 5, 7):
        k = np.sort(rng.uniform(0, 10, n))
        q = rng.normal(0, 1, n)
        sse, _ = concave_projection_oracle(k, q)
        assert solve(E.build_cnls(k, q)).objective == pytest.approx(sse, abs=1e-6)


def test_cnls_too_few_points():
    with pytest.raises(E.EstimationError):
        E.build_cnls([1.0], [2.0])


def test_identical_densities_rejected():
    with pytest.raises(E.EstimationError, match="identical"):
        E.build_cqr([2.0, 2.0, 2.0], [1.0, 2.0, 3.0], 0.5)


def test_duplicate_rows_allowed():
    k = [0.0, 1.0, 1.0, 2.0]
    q = [0.0, 1.0, 1.0, 1.5]
    p = E.build_cnls(k, q)
    sol = solve(p)
    assert sol.optimal
    assert sol.objective == pytest.approx(0.0, abs=1e-7)


def test_univariate_requires_sorted():
    with pytest.raises(E.EstimationError, match="sorted"):
        E.build_cnls_univariate([2.0, 1.0, 3.0], [1.0, 1.0, 1.0])


def test_univariate_two_points_has_two_ordering_rows():
    p = E.build_cnls_univariate([0.0, 1.0], [0.0, 1.0])
    n_regression, n_chord = 2, 1
    ordering = p.n_ub + p.n_eq - n_regression - n_chord
    assert ordering == 2


def test_sorted_rows_linear_in_n():
    k, q = _noisy_concave(40, 0)
    p = E.build_cqr(k, q, 0.5)
    assert p.meta["formulation"] == "sorted"
    assert p.n_ub + p.n_eq <= 5 * 40
    pw = E.build_cqr(k, q, 0.5, formulation="pairwise")
    assert pw.n_ub == 40 * 39


def test_univariate_equivalence_with_ties():
    rng = np.random.default_rng(4)
    k = np.round(rng.uniform(0, 10, 30))
    q = np.sqrt(k) + rng.normal(0, 0.2, 30)
    a = E.fit(k, q, E.EstimatorSpec("cnls"), formulation="pairwise")
    b = E.fit(k, q, E.EstimatorSpec("cnls"), formulation="sorted")
    np.testing.assert_allclose(a.fitted, b.fitted, atol=1e-6)


def test_multivariate_pairwise():
    rng = np.random.default_rng(9)
    k = rng.uniform(1, 5, (12, 2))
    q = np.sqrt(k[:, 0]) + np.log(k[:, 1]) + rng.normal(0, 0.05, 12)
    res = solve(E.build_cqr(k, q, 0.5))
    assert res.optimal
    # every plane majorizes the fitted values: concavity in two dimensions
    p = E.build_cqr(k, q, 0.5)
    x = res.variables
    a = x[p.layout["alpha"]]
    b = x[p.layout["beta"]].reshape(12, 2)
    f = a + np.sum(b * k, axis=1)
    planes = a[:, None] + b @ k.T
    assert np.all(planes >= f[None, :] - 1e-6)


# -- CQR and pCQR ------------------------------------------------------------

@pytest.mark.parametrize("tau", [0.0, 1.0, -0.1, 1.5])
def test_tau_out_of_range(tau):
    with pytest.raises(E.EstimationError):
        E.build_cqr([0, 1, 2], [0, 1, 2], tau)


def test_cqr_concave_data_zero_objective():
    k = np.linspace(1, 10, 12)
    q = np.minimum(4 * k, 25 - 0.5 * k)
    sol = solve(E.build_cqr(k, q, 0.5))
    assert sol.objective == pytest.approx(0.0, abs=1e-7)


@pytest.mark.parametrize("tau", [0.5, 0.75, 0.9])
def test_cqr_coverage(tau):
    k, q = _noisy_concave(200, 21)
    res = E.fit(k, q, E.EstimatorSpec("cqr", tau=tau))
    c = E.residual_sign_counts(res.residuals, q)
    assert abs(c["below"] - tau) <= c["zero"] + 1e-12
    # at most (1 - tau) n observations strictly above the fit, plus ties
    assert c["above"] * 200 <= (1 - tau) * 200 + c["zero"] * 200 + 1e-9


def test_pcqr_gamma_zero_equals_cqr():
    k, q = _noisy_concave(30, 2)
    a = solve(E.build_cqr(k, q, 0.7))
    b = solve(E.build_pcqr(k, q, 0.7, 0.0))
    assert abs(a.objective - b.objective) <= 1e-8 * max(1.0, abs(a.objective))
    pa, pb = E.build_cqr(k, q, 0.7), E.build_pcqr(k, q, 0.7, 0.0)
    assert (pa.A_ub != pb.A_ub).nnz == 0 and (pa.A_eq != pb.A_eq).nnz == 0
    assert pb.Q.nnz == 0


def test_pcqr_large_gamma_shrinks_slopes():
    k, q = _noisy_concave(25, 3)
    res = E.fit(k, q, E.EstimatorSpec("pcqr", tau=0.5, gamma=1e6))
    beta = res.solution.variables[res.problem.layout["beta"]]
    assert np.abs(beta).max() <= 1e-2


def test_pcqr_negative_gamma():
    with pytest.raises(E.EstimationError):
        E.build_pcqr([0, 1, 2], [0, 1, 2], 0.5, -1.0)


def test_pcqr_three_point_penalty_raises_objective():
    k, q = [0.0, 1.0, 2.0], [0.0, 0.0, 1.0]
    a = solve(E.build_cqr(k, q, 0.5)).objective
    b = solve(E.build_pcqr(k, q, 0.5, 1.0)).objective
    assert b >= a - 1e-9


def test_penalty_monotonicity():
    k, q = _noisy_concave(40, 5)
    loss, norm = [], []
    for g in (0.0, 0.01, 0.1, 1.0, 10.0):
        res = E.fit(k, q, E.EstimatorSpec("pcqr", tau=0.6, gamma=g))
        x = res.solution.variables
        p = res.problem
        beta = x[p.layout["beta"]]
        loss.append(float(p.c @ x))
        norm.append(float(beta @ beta))
    assert all(b >= a - 1e-6 for a, b in zip(loss, loss[1:]))
    # gamma = 0 has non-unique slopes; compare the penalized fits only
    assert all(b <= a + 1e-6 * max(1.0, a) for a, b in zip(norm[1:], norm[2:]))


def test_spec_validation():
    with pytest.raises(E.EstimationError):
        E.EstimatorSpec("cnls", tau=0.5)
    with pytest.raises(E.EstimationError):
        E.EstimatorSpec("cqr")
    with pytest.raises(E.EstimationError):
        E.EstimatorSpec("cqr", tau=0.5, gamma=1.0)
    assert E.EstimatorSpec("pcqr", tau=0.5).gamma == 0.0


# -- CQRb --------------------------------------------------------------------

def _singleton_bags(k, q):
    n = len(k)
    return [Bag(float(a), float(b), 1.0 / n, 1, (i, 0)) for i, (a, b) in enumerate(zip(k, q))]


def test_cqrb_one_point_per_bag_matches_cqr():
    k, q = _noisy_concave(60, 7)
    raw = E.fit(k, q, E.EstimatorSpec("cqr", tau=0.75))
    bag = E.fit_bags(_singleton_bags(k, q), 0.75, anchor_origin=False)
    grid = np.linspace(k.min(), k.max(), 500)
    assert np.abs(raw.curve(grid) - bag.curve(grid)).max() <= 1e-6


def test_cqrb_penalty_scales_with_weights():
    # uniform weights 1/n divide the loss by n, so CQRb(gamma) fits as pCQR(n gamma)
    k, q = _noisy_concave(30, 8)
    bag = E.fit_bags(_singleton_bags(k, q), 0.5, 0.01, anchor_origin=False)
    raw = E.fit(k, q, E.EstimatorSpec("pcqr", tau=0.5, gamma=0.3))
    np.testing.assert_allclose(bag.fitted, raw.fitted, atol=1e-5)


def test_cqrb_concave_bags_zero_objective():
    k = np.linspace(1, 10, 10)
    bags = _singleton_bags(k, np.minimum(6 * k, 40 - k))
    sol = solve(E.build_cqrb(bags, 0.5, 0.0))
    assert sol.objective == pytest.approx(0.0, abs=1e-8)


def test_cqrb_doubling_counts_is_identity():
    k, q = _noisy_concave(20, 9)
    bags = [Bag(float(a), float(b), w, p, (i, 0)) for i, (a, b, w, p)
            in enumerate(zip(k, q, np.full(20, 0.05), np.arange(1, 21)))]
    doubled = [Bag(b.k_centroid, b.q_centroid, b.weight, 2 * b.point_count, b.cell) for b in bags]
    a = E.fit_bags(bags, 0.6, 0.1, anchor_origin=False)
    b = E.fit_bags(doubled, 0.6, 0.1, anchor_origin=False)
    np.testing.assert_allclose(a.fitted, b.fitted, atol=1e-9)


def test_cqrb_weight_sum_checked():
    bags = [Bag(1.0, 1.0, 0.5, 1, (0, 0)), Bag(2.0, 2.0, 0.4, 1, (1, 0))]
    with pytest.raises(E.EstimationError, match="weights"):
        E.build_cqrb(bags, 0.5)
    with pytest.raises(E.EstimationError):
        E.build_cqrb([], 0.5)


def test_cqrb_weighted_coverage():
    k, q = _noisy_concave(400, 10)
    from cqrb.bagging import bag_observations, make_grid
    bags = bag_observations((k, q), make_grid((k, q), 15, 40))
    for tau in (0.5, 0.75, 0.9):
        res = E.fit_bags(bags, tau, anchor_origin=False)
        w = res.problem.meta["weights"]
        c = E.residual_sign_counts(res.residuals, res.problem.meta["q"], w)
        assert abs(c["below"] - tau) <= c["zero"] + 1e-9


# -- anchor -------------------------------------------------------------------

def test_anchor_single_bag():
    out = E.add_origin_anchor([Bag(2.0, 20.0, 1.0, 3, (0, 0))])
    assert (out[0].k_centroid, out[0].q_centroid) == (0.0, 0.0)
    assert out[0].weight == pytest.approx(1 / 4)
    assert out[1].weight == pytest.approx(3 / 4)
    assert sum(b.weight for b in out) == pytest.approx(1.0, abs=1e-12)


def test_anchor_idempotent():
    once = E.add_origin_anchor([Bag(2.0, 20.0, 1.0, 3, (0, 0))])
    assert E.add_origin_anchor(once) == once
    k, q = E.add_origin_anchor((np.array([1.0, 2.0]), np.array([3.0, 4.0])))
    k2, q2 = E.add_origin_anchor((k, q))
    assert k2.size == 3 and q2.size == 3


def test_anchor_explicit_weight():
    out = E.add_origin_anchor([Bag(2.0, 20.0, 1.0, 3, (0, 0))], weight=0.1)
    assert out[0].weight == 0.1
    with pytest.raises(E.EstimationError):
        E.add_origin_anchor([Bag(2.0, 20.0, 1.0, 3, (0, 0))], weight=1.0)


@pytest.mark.parametrize("tau", [0.5, 0.75, 0.9])
def test_anchored_fit_near_origin(tau):
    rng = np.random.default_rng(12)
    k = rng.uniform(10, 100, 300)
    q = np.minimum(80 * k, 2000 - 15 * (k - 25)) * (1 + 0.05 * rng.standard_normal(300))
    from cqrb.bagging import bag_observations, make_grid
    bags = bag_observations((k, q), make_grid((k, q), 20, 60))
    res = E.fit_bags(bags, tau, 0.0)
    assert res.curve(0.0) <= 1e-6 * 2000


# -- curve extraction and evaluation -----------------------------------------

def test_six_piece_breakpoints(six_piece_curve):
    assert six_piece_curve.piece_count == 6
    # reference breakpoints were printed from rounded hyperplanes
    np.testing.assert_allclose(six_piece_curve.breakpoints, SIX_PIECE_BREAKS, atol=0.1)


def test_single_hyperplane_curve():
    c = E.curve_from_hyperplanes([5.0], [2.0], 10.0)
    assert c.piece_count == 1
    assert (c.k_lo, c.k_hi) == (0.0, 10.0)


def test_two_hyperplanes_breakpoint():
    c = E.curve_from_hyperplanes([0.0, 1.0], [1.0, 0.0], 3.0)
    np.testing.assert_allclose(c.breakpoints, [1.0])
    k = np.linspace(0, 3, 31)
    assert np.all(c(k) <= k + 1e-12) and np.all(c(k) <= 1.0 + 1e-12)


def test_duplicate_hyperplanes_merged():
    c = E.curve_from_hyperplanes([0.0, 1e-7, 10.0], [2.0, 2.0 + 1e-7, 0.0], 20.0)
    assert c.piece_count == 2


def test_extract_requires_optimal():
    p = E.build_cqr([0, 1, 2], [0, 1, 1], 0.5)
    bad = SolverSolution(objective=np.nan, variables=np.zeros(p.n_vars),
                         status=SolverStatus.ITERATION_LIMIT)
    with pytest.raises(E.EstimationError):
        E.extract_curve(bad, p)


def test_piece_count_bounded_by_n():
    k, q = _noisy_concave(80, 13)
    for tau in (0.3, 0.8):
        res = E.fit(k, q, E.EstimatorSpec("cqr", tau=tau))
        assert res.curve.piece_count <= 80


def test_curve_reproduces_fitted_values():
    k, q = _noisy_concave(50, 14)
    res = E.fit(k, q, E.EstimatorSpec("cqr", tau=0.6))
    np.testing.assert_allclose(res.curve(k), res.fitted, atol=1e-6)


def test_noncanonical_extraction():
    k, q = _noisy_concave(20, 15)
    res = E.fit(k, q, E.EstimatorSpec("pcqr", tau=0.5, gamma=0.1))
    raw = E.extract_curve(res.solution, res.problem, canonical=False)
    grid = np.linspace(k.min(), k.max(), 200)
    assert np.abs(raw(grid) - res.curve(grid)).max() <= 1e-4 * np.ptp(q)


def test_evaluate_examples(twelve_piece_curve, six_piece_curve):
    assert E.evaluate_curve(twelve_piece_curve, 34.02) == pytest.approx(2108.8, abs=1)
    assert E.evaluate_curve(six_piece_curve, 0.0) == pytest.approx(45.12, abs=1e-9)
    assert E.evaluate_curve(twelve_piece_curve, 0.0) == 0.0
    assert E.evaluate_curve(twelve_piece_curve, 200.0) < 0
    assert E.evaluate_curve(twelve_piece_curve, 200.0, clamp=True) == 0.0
    with pytest.raises(E.EstimationError):
        E.evaluate_curve(twelve_piece_curve, -1.0)


def test_curve_invariants_enforced():
    with pytest.raises(CurveError):
        PiecewiseLinearCurve.from_table([(0, 1, 0, 1), (1, 1, 1, 2)])
    with pytest.raises(CurveError):
        PiecewiseLinearCurve.from_table([(0, 2, 0, 1), (1, 1, 1.5, 2)])


# -- gamma search -------------------------------------------------------------

def _crossing_instance():
    rng = np.random.default_rng(240)
    n = int(rng.integers(8, 25))
    k = np.sort(rng.uniform(1, 10, n))
    q = np.sqrt(k) * 3 + rng.standard_normal(n) * rng.uniform(0.2, 2)
    return k, q


def test_min_gamma_single_tau():
    k, q = _noisy_concave(30, 16)
    r = E.find_min_gamma((k, q), [0.5], [0.0, 1.0])
    assert r.gamma == 0.0 and r.passed


def test_min_gamma_well_separated():
    rng = np.random.default_rng(17)
    k = rng.uniform(1, 10, 60)
    q = np.sqrt(k) * 10 + rng.uniform(-1, 1, 60)
    q[:20] -= 5
    r = E.find_min_gamma((k, q), [0.1, 0.9], [0.0, 0.1, 1.0])
    assert r.gamma == 0.0 and r.passed


def test_min_gamma_engineered_instance(caplog):
    k, q = _crossing_instance()
    caplog.set_level(logging.WARNING)
    r = E.find_min_gamma((k, q), [0.5, 0.75, 0.9], [0.0, 0.1, 1.0, 10.0])
    assert r.passed
    assert r.gamma == 10.0
    assert [g for g, _ in r.trials] == [0.0, 0.1, 1.0, 10.0]


def test_min_gamma_none_qualifies():
    k, q = _crossing_instance()
    r = E.find_min_gamma((k, q), [0.5, 0.75, 0.9], [0.0, 0.1])
    assert not r.passed
    assert r.gamma == 0.1


def test_min_gamma_validation():
    with pytest.raises(E.EstimationError):
        E.find_min_gamma(([1.0, 2.0], [1.0, 2.0]), [], [0.0])
    with pytest.raises(E.EstimationError):
        E.find_min_gamma(([1.0, 2.0], [1.0, 2.0]), [0.5], [])
    with pytest.raises(E.EstimationError):
        E.find_min_gamma(([1.0, 2.0], [1.0, 2.0]), [0.9, 0.5], [0.0])


# -- constraint counting --------------------------------------------------------

def test_count_constraints():
    assert E.count_constraints(3360, "cqr")["total"] == 11_292_960
    assert E.count_constraints(1)["total"] == 2
    c = E.count_constraints(643, "cqrb")
    assert c["total"] == 414_092
    assert c == {"equality": 643, "concavity": 643 * 642, "nonneg_pairs": 643, "total": 414_092}


# -- serialization ----------------------------------------------------------------

def test_text_round_trip_bit_exact():
    k, q = _noisy_concave(40, 18)
    curve = E.fit(k, q, E.EstimatorSpec("pcqr", tau=0.75, gamma=0.1)).curve
    back = E.curve_from_text(E.curve_to_text(curve))
    assert back.segments == curve.segments
    assert back.tau == curve.tau and back.gamma == curve.gamma


def test_json_round_trip_bit_exact(twelve_piece_curve):
    back = E.curve_from_json(E.curve_to_json(twelve_piece_curve))
    assert back.segments == twelve_piece_curve.segments
    k, q = _noisy_concave(30, 19)
    curve = E.fit(k, q, E.EstimatorSpec("cqr", tau=0.4)).curve
    back = E.curve_from_json(E.curve_to_json(curve))
    assert back.segments == curve.segments and back.tau == 0.4


def test_concavity_violation_zero_for_line():
    rng = np.random.default_rng(0)
    assert E.concavity_violation(PiecewiseLinearCurve.from_table([(0, 1, 0, 5)]), rng) <= 1e-12
