"""Train/test protocol, error metrics, comparison reports and stochastic dominance."""

from __future__ import annotations

import csv
import io
import json
import logging
import re
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .bagging import bag_observations, make_grid
from .baseline import BASELINE_VERSION, calibrate_dgkhv, evaluate_triangular
from .estimators import EstimationError, evaluate_curve, fit_bags
from .solver import SolverConfig
from .traffic import CONGESTED_SHARE_MIN, congested_share, extract_traffic_parameters

log = logging.getLogger(__name__)

DEFAULT_TAUS = (0.75, 0.80, 0.85)
AGGREGATIONS = ("week-lane", "week-road", "month-lane", "month-road")
REPORT_COLUMNS = ("aggregation", "method", "in_sample_rmse", "in_sample_mae",
                  "out_of_sample_rmse", "out_of_sample_mae", "n_datasets", "units")

_WEEK = re.compile(r"^(\d{4})-W(\d{2})$")
_MONTH = re.compile(r"^(\d{4})-(\d{2})$")


def units_for(aggregation: str) -> str:
    return "veh/lane/h" if aggregation.endswith("lane") else "veh/h"


# -- pairing -----------------------------------------------------------------

@dataclass(frozen=True)
class Pairing:
    pairs: tuple[tuple[str, str], ...]
    unpaired: tuple[str, ...]


def _next_year(label: str) -> Optional[str]:
    for pat, fmt in ((_WEEK, "{}-W{}"), (_MONTH, "{}-{}")):
        m = pat.match(label)
        if m:
            return fmt.format(int(m.group(1)) + 1, m.group(2))
    return None


def split_train_test(labels) -> Pairing:
    """Pair each period with the same period one year later.

    ``labels`` is any iterable of period labels (or a mapping keyed by them).
    Periods that neither train nor test any pair are reported as unpaired.
    """
    labels = sorted(set(labels))
    known = set(labels)
    pairs = []
    used = set()
    for lab in labels:
        nxt = _next_year(lab)
        if nxt is None:
            raise ValueError(f"period label {lab!r} is neither YYYY-Www nor YYYY-MM")
        if nxt in known:
            pairs.append((lab, nxt))
            used.update((lab, nxt))
    return Pairing(tuple(pairs), tuple(lab for lab in labels if lab not in used))


# -- errors ------------------------------------------------------------------

def compute_errors(predicted, actual) -> dict:
    p = np.asarray(predicted, dtype=float).ravel()
    a = np.asarray(actual, dtype=float).ravel()
    if p.size != a.size:
        raise ValueError(f"length mismatch: {p.size} predictions, {a.size} observations")
    if p.size == 0:
        raise ValueError("need at least one observation")
    d = p - a
    return {"rmse": float(np.sqrt(np.mean(d * d))), "mae": float(np.mean(np.abs(d)))}


def cumulative_error_distribution(errors) -> tuple[np.ndarray, np.ndarray]:
    """Empirical CDF at each distinct error value: (values, cdf)."""
    e = np.sort(np.asarray(errors, dtype=float).ravel())
    if e.size == 0:
        raise ValueError("no errors")
    values, counts = np.unique(e, return_counts=True)
    return values, np.cumsum(counts) / e.size


def _cdf_at(sorted_e: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.searchsorted(sorted_e, x, side="right") / sorted_e.size


def dominance_check(errors_a, errors_b, tol: float = 1e-12) -> dict:
    """Weak first- and second-order dominance of ``a`` over ``b`` (smaller errors better).

    First order: F_a(x) >= F_b(x) everywhere.  Second order: the integral of
    F_a up to x is >= that of F_b for every x.  Both CDFs are step functions,
    so checking at the merged support points is exact.
    """
    a = np.sort(np.asarray(errors_a, dtype=float).ravel())
    b = np.sort(np.asarray(errors_b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be nonempty")
    x = np.union1d(a, b)
    fa, fb = _cdf_at(a, x), _cdf_at(b, x)
    first = bool(np.all(fa >= fb - tol))
    # integral of a right-continuous step CDF over [x0, x_i]
    dx = np.diff(x)
    ia = np.concatenate([[0.0], np.cumsum(fa[:-1] * dx)])
    ib = np.concatenate([[0.0], np.cumsum(fb[:-1] * dx)])
    second = bool(np.all(ia >= ib - tol * max(1.0, float(x[-1] - x[0]))))
    return {"first_order": first, "second_order": second}


# -- comparison --------------------------------------------------------------

@dataclass
class DatasetResult:
    dataset: str
    aggregation: str
    method: str
    in_sample: dict
    out_of_sample: dict
    included: bool = True
    note: str = ""


@dataclass
class EvaluationReport:
    rows: list = field(default_factory=list)
    excluded: list = field(default_factory=list)
    unpaired: list = field(default_factory=list)
    baseline_version: str = BASELINE_VERSION

    def methods(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r.method not in seen:
                seen.append(r.method)
        return seen

    def aggregations(self) -> list[str]:
        return sorted({r.aggregation for r in self.rows},
                      key=lambda a: (AGGREGATIONS.index(a) if a in AGGREGATIONS else 99, a))

    def summary(self, allow_mixed_units: bool = False) -> list[dict]:
        """Per (aggregation, method) means, plus an overall row when units allow."""
        out = []
        for agg in self.aggregations():
            for method in self.methods():
                sel = [r for r in self.rows if r.aggregation == agg and r.method == method]
                if sel:
                    out.append(_mean_row(agg, method, sel, units_for(agg)))
        units = {units_for(a) for a in self.aggregations()}
        if len(units) <= 1 or allow_mixed_units:
            label = "average" if len(units) <= 1 else "average (mixed units)"
            for method in self.methods():
                sel = [r for r in self.rows if r.method == method]
                if sel:
                    out.append(_mean_row(label, method, sel, "/".join(sorted(units))))
        return out

    def to_table(self, allow_mixed_units: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for row in self.summary(allow_mixed_units):
            w.writerow([_fmt(row[c]) for c in REPORT_COLUMNS])
        return buf.getvalue()

    def to_json(self, allow_mixed_units: bool = False) -> str:
        return json.dumps({
            "baseline_version": self.baseline_version,
            "summary": self.summary(allow_mixed_units),
            "datasets": [r.__dict__ for r in self.rows],
            "excluded": self.excluded,
            "unpaired": self.unpaired,
        }, indent=2, sort_keys=True)


def _fmt(v):
    return f"{v:.2f}" if isinstance(v, float) else v


def _mean_row(agg, method, rows, units) -> dict:
    def m(phase, key):
        return float(np.mean([getattr(r, phase)[key] for r in rows]))

    return {"aggregation": agg, "method": method,
            "in_sample_rmse": m("in_sample", "rmse"), "in_sample_mae": m("in_sample", "mae"),
            "out_of_sample_rmse": m("out_of_sample", "rmse"),
            "out_of_sample_mae": m("out_of_sample", "mae"),
            "n_datasets": len(rows), "units": units}


@dataclass(frozen=True)
class BagSpec:
    u: int = 20
    v_segments: int = 200


def cqrb_label(tau: float) -> str:
    return f"CQRb@{tau:g}"


def run_comparison(train, test, *, dataset: str = "dataset", aggregation: str = "week-road",
                   taus: Sequence[float] = DEFAULT_TAUS, bag_spec: BagSpec = BagSpec(),
                   gamma: float = 0.0, congested_min: Optional[float] = CONGESTED_SHARE_MIN,
                   config: SolverConfig = SolverConfig()) -> tuple[list, list]:
    """DGKHV and CQRb per tau fitted on ``train``, scored on ``train`` and ``test``.

    ``train`` and ``test`` are ``(k, q)`` array pairs of aggregated observations;
    errors are always computed on these, never on bags.  Returns
    ``(rows, excluded)``: a (dataset, tau) fit whose bags have less than
    ``congested_min`` of their count beyond the fitted critical density is
    excluded, and DGKHV is kept when at least one tau survives.
    """
    k_tr, q_tr = (np.asarray(a, dtype=float) for a in train)
    k_te, q_te = (np.asarray(a, dtype=float) for a in test)
    grid = make_grid((k_tr, q_tr), bag_spec.u, bag_spec.v_segments)
    bags = bag_observations((k_tr, q_tr), grid)
    rows, excluded = [], []
    for tau in taus:
        try:
            res = fit_bags(bags, tau, gamma, config=config)
        except EstimationError as exc:
            excluded.append({"dataset": dataset, "method": cqrb_label(tau), "reason": str(exc)})
            log.warning("%s tau=%g: %s", dataset, tau, exc)
            continue
        params = extract_traffic_parameters(res.curve)
        share = congested_share(bags, params.critical_density)
        if congested_min is not None and share < congested_min:
            excluded.append({"dataset": dataset, "method": cqrb_label(tau),
                             "reason": f"congested share {share:.3f} below {congested_min:g}"})
            log.info("%s tau=%g excluded: congested share %.3f", dataset, tau, share)
            continue

        def pred(k, curve=res.curve):
            return np.maximum(evaluate_curve(curve, k), 0.0)

        rows.append(DatasetResult(dataset, aggregation, cqrb_label(tau),
                                  compute_errors(pred(k_tr), q_tr), compute_errors(pred(k_te), q_te)))
    if rows:
        fd = calibrate_dgkhv((k_tr, q_tr))
        rows.insert(0, DatasetResult(dataset, aggregation, "DGKHV",
                                     compute_errors(evaluate_triangular(fd, k_tr), q_tr),
                                     compute_errors(evaluate_triangular(fd, k_te), q_te)))
    else:
        excluded.append({"dataset": dataset, "method": "DGKHV", "reason": "no CQRb fit retained"})
    return rows, excluded


def compare_datasets(datasets: Mapping[str, tuple], *, aggregation: str = "week-road",
                     **kwargs) -> EvaluationReport:
    """Pair periods year over year and run the comparison on every pair."""
    pairing = split_train_test(datasets.keys())
    report = EvaluationReport(unpaired=list(pairing.unpaired))
    for train_label, test_label in pairing.pairs:
        rows, excl = run_comparison(datasets[train_label], datasets[test_label],
                                    dataset=f"{train_label}->{test_label}",
                                    aggregation=aggregation, **kwargs)
        report.rows.extend(rows)
        report.excluded.extend(excl)
    return report


def per_dataset_cdf_csv(report: EvaluationReport, phase: str = "out_of_sample",
                        metric: str = "rmse") -> str:
    """Long-format CDF table per method: method,value,cdf."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("method", metric, "cdf"))
    for method in report.methods():
        errs = [getattr(r, phase)[metric] for r in report.rows if r.method == method]
        if not errs:
            continue
        values, cdf = cumulative_error_distribution(errs)
        for v, c in zip(values, cdf):
            w.writerow((method, repr(float(v)), repr(float(c))))
    return buf.getvalue()


def dataset_rows_csv(report: EvaluationReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("dataset",) + REPORT_COLUMNS[:2] + REPORT_COLUMNS[2:6])
    for r in report.rows:
        w.writerow((r.dataset, r.aggregation, r.method,
                    repr(r.in_sample["rmse"]), repr(r.in_sample["mae"]),
                    repr(r.out_of_sample["rmse"]), repr(r.out_of_sample["mae"])))
    return buf.getvalue()
