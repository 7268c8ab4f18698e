"""Command-line pipeline: ingest -> bag -> fit -> params -> compare.

Exit codes: 0 success, 1 self-test check failed, 2 input error,
3 empty result, 4 solver failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
import warnings
from datetime import date
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import bagging, estimators, evalharness, synthetic, traffic
from .core import CurveError, kq_arrays
from .solver import SolverConfig

log = logging.getLogger("cqrb")

EXIT_OK, EXIT_CHECK, EXIT_INPUT, EXIT_EMPTY, EXIT_SOLVER = 0, 1, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


class Outputs:
    """Atomic file writer that can roll back everything it wrote."""

    def __init__(self, directory: Optional[Path] = None):
        self.directory = directory
        self.written: list[Path] = []

    def path(self, name) -> Path:
        p = Path(name)
        return p if self.directory is None or p.is_absolute() else self.directory / p

    def write(self, name, text: str) -> Path:
        target = self.path(name)
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
            os.replace(tmp, target)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        self.written.append(target)
        return target

    def rollback(self) -> None:
        for p in self.written:
            try:
                p.unlink()
            except FileNotFoundError:
                pass
        self.written.clear()


def _solver_config(args) -> SolverConfig:
    return SolverConfig(feasibility_tol=args.feasibility_tol, optimality_tol=args.optimality_tol,
                        kkt_tol=args.kkt_tol, max_iter=args.max_iter)


def _load_observations(path) -> list:
    try:
        obs = traffic.read_observations(path)
    except FileNotFoundError:
        raise CliError(f"no such file: {path}") from None
    except traffic.TrafficDataError as exc:
        raise CliError(f"{path}: {exc}") from None
    if not obs:
        raise CliError(f"{path}: no observations", EXIT_EMPTY)
    return obs


def _print(args, *parts):
    if not getattr(args, "quiet", False):
        print(*parts)


# -- subcommands -------------------------------------------------------------

def cmd_ingest(args) -> int:
    column_map = {}
    for item in args.column_map or []:
        src, sep, dst = item.partition("=")
        if not sep:
            raise CliError(f"--column-map expects SOURCE=TARGET, got {item!r}")
        column_map[src] = dst
    try:
        records = traffic.parse_vehicle_records(args.input, column_map)
    except FileNotFoundError:
        raise CliError(f"no such file: {args.input}") from None
    except traffic.TrafficDataError as exc:
        raise CliError(f"{args.input}: {exc}") from None
    kept, dropped = traffic.filter_faulty(records)
    start, end = traffic.parse_peak_window(args.peak)
    grouping = traffic.PER_LANE if args.group == "lane" else traffic.PER_DIRECTION
    spec = traffic.AggregationSpec(interval=args.interval, grouping=grouping, peak_start=start,
                                   peak_end=end, normalize_lanes=args.normalize_lanes)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        obs, summary = traffic.aggregate_detailed(kept, spec)
    _print(args, f"records read: {len(records)}; faulty: {dropped} dropped; "
                 f"used: {summary.used}; outside peak window: {summary.outside_window}; "
                 f"zero speed: {summary.zero_speed}; intervals emitted: {len(obs)}")
    if not obs:
        raise CliError("no intervals to emit", EXIT_EMPTY)
    Outputs().write(args.output, traffic.observations_to_csv(obs))
    return EXIT_OK


def cmd_bag(args) -> int:
    obs = _load_observations(args.input)
    grid, bags = bagging.bag_observation_list(obs, args.u, args.v)
    report = bagging.bag_reduction_report(obs, bags)
    Outputs().write(args.output, bagging.bags_to_csv(bags))
    _print(args, f"observations: {report['n']}; bags: {report['bag_count']}; "
                 f"ratio: {report['ratio']:.2f}; grid: {grid.u}x{grid.v_segments}")
    return EXIT_OK


def _tau_name(tau: float) -> str:
    return f"{tau:g}".replace(".", "_")


def cmd_fit(args) -> int:
    taus = sorted(set(args.tau or [0.5]))
    cfg = _solver_config(args)
    method = estimators.Method(args.method)
    out = Outputs(Path(args.output_dir))
    if args.bags:
        try:
            bags = bagging.read_bags(args.bags)
        except FileNotFoundError:
            raise CliError(f"no such file: {args.bags}") from None
        except bagging.BaggingError as exc:
            raise CliError(f"{args.bags}: {exc}") from None
        k, q, _ = bagging.bag_arrays(bags)
    else:
        obs = _load_observations(args.input)
        k, q = kq_arrays(obs)
        bags = bagging.bag_observation_list(obs, args.u, args.v)[1] if method is estimators.Method.CQRB else None
    if method is estimators.Method.CQRB and bags is None:
        raise CliError("cqrb needs observations or bags")
    if method is not estimators.Method.CQRB and args.bags:
        raise CliError("--bags only applies to --method cqrb")

    try:
        if args.gamma_grid:
            grid = sorted(float(g) for g in args.gamma_grid.split(","))
            data = bags if method is estimators.Method.CQRB else (k, q)
            search = estimators.find_min_gamma(data, taus, grid, config=cfg,
                                               anchor_origin=not args.no_anchor)
            fits, gamma, crossing_ok = search.fits, search.gamma, search.passed
        else:
            gamma = args.gamma
            fits = {}
            for tau in taus:
                if method is estimators.Method.CQRB:
                    fits[tau] = estimators.fit_bags(bags, tau, gamma, anchor_origin=not args.no_anchor,
                                                    config=cfg)
                else:
                    spec = estimators.EstimatorSpec(method, tau=tau if method.is_quantile else None,
                                                    gamma=gamma if method.is_penalized else None,
                                                    anchor_origin=not args.no_anchor)
                    fits[tau] = estimators.fit(k, q, spec, cfg)
            crossing_ok = True
            if len(taus) > 1:
                k_grid = np.linspace(k.min(), k.max(), 1000)
                worst = estimators.max_crossing({t: f.curve for t, f in fits.items()}, k_grid)
                crossing_ok = worst <= 1e-6 * max(float(q.max() - q.min()), 1e-300)
        params = {}
        for tau, res in sorted(fits.items()):
            curve = res.curve
            name = f"curve_tau{_tau_name(tau)}"
            out.write(f"{name}.txt", estimators.curve_to_text(curve))
            out.write(f"{name}.json", estimators.curve_to_json(curve))
            p = traffic.extract_traffic_parameters(curve).as_dict()
            p.update(tau=tau, gamma=gamma, objective=res.solution.objective,
                     iterations=res.solution.iterations)
            params[f"{tau:g}"] = p
            _print(args, f"tau={tau:g} gamma={gamma:g} objective={res.solution.objective:.6g} "
                         f"pieces={curve.piece_count}")
        doc = {"method": method.value, "taus": taus, "gamma": gamma,
               "non_crossing": bool(crossing_ok), "parameters": params}
        if bags is not None:
            doc["bags"] = len(bags)
        out.write("params.json", json.dumps(doc, indent=2, sort_keys=True))
        if not crossing_ok:
            log.warning("quantile curves cross; consider --gamma-grid")
    except estimators.EstimationError as exc:
        out.rollback()
        raise CliError(f"fit failed: {exc}", EXIT_SOLVER) from None
    except BaseException:
        out.rollback()
        raise
    return EXIT_OK


def cmd_params(args) -> int:
    try:
        text = Path(args.curve).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise CliError(f"no such file: {args.curve}") from None
    try:
        curve = (estimators.curve_from_json(text) if text.lstrip().startswith("{")
                 else estimators.curve_from_text(text))
    except (CurveError, ValueError, KeyError) as exc:
        raise CliError(f"{args.curve}: {exc}") from None
    doc = json.dumps(traffic.extract_traffic_parameters(curve).as_dict(), indent=2, sort_keys=True)
    if args.output:
        Outputs().write(args.output, doc)
    _print(args, doc)
    return EXIT_OK


def _synthetic_datasets(seed: int) -> dict:
    labels = [f"{y}-W{w:02d}" for y in (2016, 2017) for w in (10, 11, 12)]
    return synthetic.period_datasets(labels, n=300, seed=seed, noise="skewed")


def _observation_datasets(args) -> dict:
    if args.train and args.test:
        tr = kq_arrays(_load_observations(args.train))
        te = kq_arrays(_load_observations(args.test))
        return {"2000-01": tr, "2001-01": te}
    if args.input:
        obs = _load_observations(args.input)
        return {lab: kq_arrays(o) for lab, o in traffic.split_by_period(obs, args.period).items()}
    raise CliError("compare needs --synthetic, --input, or both --train and --test")


def cmd_compare(args) -> int:
    taus = sorted(set(args.tau or evalharness.DEFAULT_TAUS))
    if args.synthetic:
        datasets = _synthetic_datasets(args.seed)
        if 0.5 not in taus:
            taus = [0.5] + taus
    else:
        datasets = _observation_datasets(args)
    pairing = evalharness.split_train_test(datasets.keys())
    for lab in pairing.unpaired:
        _print(args, f"unpaired period: {lab}")
    if not pairing.pairs:
        raise CliError("no train/test pairs", EXIT_EMPTY)
    out = Outputs(Path(args.output_dir))
    try:
        report = evalharness.compare_datasets(
            datasets, aggregation=args.aggregation, taus=taus,
            bag_spec=evalharness.BagSpec(args.u, args.v), gamma=args.gamma,
            congested_min=args.filter_congested if args.filter_congested > 0 else None,
            config=_solver_config(args))
    except estimators.EstimationError as exc:
        raise CliError(f"comparison failed: {exc}", EXIT_SOLVER) from None
    if not report.rows:
        raise CliError("every dataset was excluded", EXIT_EMPTY)
    try:
        out.write("report.csv", report.to_table())
        out.write("report.json", report.to_json())
        out.write("datasets.csv", evalharness.dataset_rows_csv(report))
        for phase in ("in_sample", "out_of_sample"):
            for metric in ("rmse", "mae"):
                out.write(f"cdf_{phase}_{metric}.csv",
                          evalharness.per_dataset_cdf_csv(report, phase, metric))
    except BaseException:
        out.rollback()
        raise
    _print(args, report.to_table().rstrip())
    for e in report.excluded:
        _print(args, f"excluded {e['dataset']} {e['method']}: {e['reason']}")
    if args.synthetic:
        summary = {r["method"]: r for r in report.summary() if r["aggregation"] == args.aggregation}
        median, dg = summary.get(evalharness.cqrb_label(0.5)), summary.get("DGKHV")
        if median is None or dg is None:
            raise CliError("self-check needs both CQRb@0.5 and DGKHV rows", EXIT_EMPTY)
        ok = median["in_sample_mae"] < dg["in_sample_mae"]
        _print(args, f"check CQRb@0.5 in-sample MAE {median['in_sample_mae']:.2f} < "
                     f"DGKHV {dg['in_sample_mae']:.2f}: {'PASS' if ok else 'FAIL'}")
        if not ok:
            return EXIT_CHECK
    return EXIT_OK


def cmd_selftest(args) -> int:
    """End-to-end run on synthetic vehicle records in a scratch directory."""
    work = Path(args.output_dir) if args.output_dir else Path(tempfile.mkdtemp(prefix="cqrb-selftest-"))
    work.mkdir(parents=True, exist_ok=True)
    records = synthetic.vehicle_records(date(2016, 3, 7), seed=args.seed)
    Outputs(work).write("records.csv", traffic.records_to_csv(records))
    common = ["--quiet"] if args.quiet else []
    # global flags go before the subcommand
    steps = [
        ["ingest", "--input", str(work / "records.csv"), "--output", str(work / "obs.csv"),
         "--group", "lane"],
        ["bag", "--input", str(work / "obs.csv"), "--output", str(work / "bags.csv"),
         "--u", "20", "--v", "200"],
        ["fit", "--method", "cqrb", "--bags", str(work / "bags.csv"), "--tau", "0.5",
         "--tau", "0.75", "--tau", "0.9", "--gamma-grid", "0,0.1,1,10",
         "--output-dir", str(work / "fit")],
        ["params", "--curve", str(work / "fit" / "curve_tau0_75.txt")],
        ["compare", "--synthetic", "--seed", str(args.seed), "--output-dir", str(work / "compare")],
    ]
    for step in steps:
        code = main(common + step)
        if code != EXIT_OK:
            print(f"self-test step {step[0]} failed with exit code {code}")
            return code
    _print(args, f"self-test passed; outputs in {work}")
    return EXIT_OK


# -- argument parsing --------------------------------------------------------

def _add_solver_args(p):
    d = SolverConfig()
    p.add_argument("--feasibility-tol", type=float, default=d.feasibility_tol)
    p.add_argument("--optimality-tol", type=float, default=d.optimality_tol)
    p.add_argument("--kkt-tol", type=float, default=d.kkt_tol)
    p.add_argument("--max-iter", type=int, default=d.max_iter)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cqrb", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON file of option defaults; flags override it")
    parser.add_argument("--verbose", "-v", action="store_true")
    parser.add_argument("--quiet", "-q", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="per-vehicle CSV -> interval observations")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--group", choices=("lane", "direction"), default="direction")
    p.add_argument("--interval", type=int, default=5, help="minutes; must divide 60")
    p.add_argument("--peak", default="06:00-20:00")
    p.add_argument("--normalize-lanes", action="store_true",
                   help="per-direction flow and density divided by the lane count")
    p.add_argument("--column-map", action="append", metavar="SOURCE=TARGET")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("bag", help="observations -> weighted grid bags")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--u", type=int, default=20, help="density segments")
    p.add_argument("--v", type=int, default=200, help="flow segments")
    p.set_defaults(func=cmd_bag)

    p = sub.add_parser("fit", help="fit quantile curves and derive parameters")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="observations CSV")
    src.add_argument("--bags", help="bags CSV (cqrb only)")
    p.add_argument("--method", choices=[m.value for m in estimators.Method], default="cqrb")
    p.add_argument("--tau", type=float, action="append")
    p.add_argument("--gamma", type=float, default=0.0)
    p.add_argument("--gamma-grid", help="comma-separated ascending grid; picks the smallest non-crossing value")
    p.add_argument("--u", type=int, default=20)
    p.add_argument("--v", type=int, default=200)
    p.add_argument("--no-anchor", action="store_true", help="do not add the (0, 0) point")
    p.add_argument("--output-dir", required=True)
    _add_solver_args(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("params", help="traffic parameters of a curve file")
    p.add_argument("--curve", required=True)
    p.add_argument("--output")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("compare", help="DGKHV vs CQRb on year-over-year pairs")
    p.add_argument("--synthetic", action="store_true")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--input", help="observations CSV split by --period")
    p.add_argument("--period", choices=("week", "month"), default="week")
    p.add_argument("--train")
    p.add_argument("--test")
    p.add_argument("--tau", type=float, action="append")
    p.add_argument("--gamma", type=float, default=0.0)
    p.add_argument("--u", type=int, default=20)
    p.add_argument("--v", type=int, default=200)
    p.add_argument("--aggregation", default="week-road", help="row label, e.g. week-lane")
    p.add_argument("--filter-congested", type=float, default=traffic.CONGESTED_SHARE_MIN,
                   help="minimum share of bags beyond k_c; 0 disables")
    p.add_argument("--output-dir", required=True)
    _add_solver_args(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("selftest", help="end-to-end run on synthetic data")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_selftest)
    return parser


def _apply_config(parser, argv) -> argparse.Namespace:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    path = pre.parse_known_args(argv)[0].config
    if not path:
        return parser.parse_args(argv)
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CliError(f"no such config file: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise CliError(f"{path}: top level must be an object")
    subs = parser._subparsers._group_actions[0].choices
    scalars = {k.replace("-", "_"): v for k, v in cfg.items() if not isinstance(v, dict)}
    sections = {k: v for k, v in cfg.items() if isinstance(v, dict)}
    bad = sorted(set(sections) - set(subs))
    if bad:
        raise CliError(f"{path}: unknown sections {', '.join(bad)}")
    seen = set()
    for name, sub in subs.items():
        known = {a.dest for a in sub._actions}
        section = {k.replace("-", "_"): v for k, v in sections.get(name, {}).items()}
        unknown = sorted(set(section) - known)
        if unknown:
            raise CliError(f"{path}: unknown options for {name}: {', '.join(unknown)}")
        defaults = {k: v for k, v in scalars.items() if k in known}
        seen.update(defaults)
        defaults.update(section)
        # required options become optional once the file supplies them
        for action in sub._actions:
            if action.dest in defaults:
                action.required = False
        for grp in sub._mutually_exclusive_groups:
            if any(a.dest in defaults for a in grp._group_actions):
                grp.required = False
        sub.set_defaults(**defaults)
    top = {a.dest for a in parser._actions}
    stray = sorted(set(scalars) - seen - top)
    if stray:
        raise CliError(f"{path}: unknown options {', '.join(stray)}")
    parser.set_defaults(**{k: v for k, v in scalars.items() if k in top and k != "config"})
    return parser.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config(parser, argv)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
