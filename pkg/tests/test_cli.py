import json
from datetime import date, datetime

import numpy as np
import pytest

from cqrb import traffic
from cqrb.cli import EXIT_EMPTY, EXIT_INPUT, EXIT_OK, EXIT_SOLVER, main
from cqrb.estimators import curve_from_json, curve_from_text
from cqrb.synthetic import observations_from_arrays, vehicle_records

HEADER = "timestamp_iso8601,station_id,direction,lane,speed_kmh,faulty\n"


@pytest.fixture
def ten_rows(tmp_path):
    lines = [f"2016-03-07T07:0{i}:00,S1,1,1,{70 + i},{int(i == 4)}\n" for i in range(10)]
    path = tmp_path / "ten.csv"
    path.write_text(HEADER + "".join(lines))
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    work = tmp_path_factory.mktemp("pipe")
    recs = vehicle_records(date(2016, 3, 7), seed=11)
    (work / "records.csv").write_text(traffic.records_to_csv(recs))
    assert main(["-q", "ingest", "--input", str(work / "records.csv"),
                 "--output", str(work / "obs.csv"), "--group", "lane"]) == EXIT_OK
    assert main(["-q", "bag", "--input", str(work / "obs.csv"),
                 "--output", str(work / "bags.csv")]) == EXIT_OK
    return work


def test_ingest_reports_dropped(ten_rows, tmp_path, capsys):
    out = tmp_path / "obs.csv"
    assert main(["ingest", "--input", str(ten_rows), "--output", str(out)]) == EXIT_OK
    text = capsys.readouterr().out
    assert "records read: 10" in text and "faulty: 1 dropped" in text
    obs = traffic.read_observations(out)
    assert sum(o.count for o in obs) == 9


def test_missing_file_exit_code(tmp_path, capsys):
    code = main(["ingest", "--input", str(tmp_path / "nope.csv"), "--output", str(tmp_path / "o.csv")])
    assert code == EXIT_INPUT
    assert "no such file" in capsys.readouterr().err


def test_bad_arguments_exit_code(capsys):
    assert main(["fit", "--tau", "x"]) == EXIT_INPUT
    assert main(["no-such-command"]) == EXIT_INPUT


def test_empty_pairing_exit_code(tmp_path, pipeline):
    # a single week of data has no year-over-year partner
    code = main(["-q", "compare", "--input", str(pipeline / "obs.csv"),
                 "--output-dir", str(tmp_path / "cmp")])
    assert code == EXIT_EMPTY
    assert not (tmp_path / "cmp" / "report.csv").exists()


def test_fit_writes_curves(tmp_path, pipeline):
    out = tmp_path / "fit"
    code = main(["-q", "fit", "--bags", str(pipeline / "bags.csv"), "--tau", "0.5", "--tau", "0.9",
                 "--gamma-grid", "0,0.1,1,10", "--output-dir", str(out)])
    assert code == EXIT_OK
    doc = json.loads((out / "params.json").read_text())
    assert doc["method"] == "cqrb" and doc["taus"] == [0.5, 0.9]
    assert doc["non_crossing"] is True
    for name in ("curve_tau0_5", "curve_tau0_9"):
        text_curve = curve_from_text((out / f"{name}.txt").read_text())
        json_curve = curve_from_json((out / f"{name}.json").read_text())
        assert text_curve.piece_count == json_curve.piece_count
        assert (np.diff(text_curve.betas) < 0).all()


def test_solver_failure_rolls_back(tmp_path, pipeline):
    out = tmp_path / "fit"
    code = main(["-q", "fit", "--bags", str(pipeline / "bags.csv"), "--tau", "0.5",
                 "--tau", "0.9", "--max-iter", "1", "--output-dir", str(out)])
    assert code == EXIT_SOLVER
    assert not out.exists() or not any(out.iterdir())


def test_reruns_byte_identical(tmp_path, pipeline):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["-q", "fit", "--input", str(pipeline / "obs.csv"), "--method", "cqrb",
                     "--tau", "0.75", "--output-dir", str(out)]) == EXIT_OK
        outs.append({p.name: p.read_bytes() for p in out.iterdir()})
    assert outs[0] == outs[1]


def test_params_from_curve(tmp_path, pipeline):
    out = tmp_path / "fit"
    assert main(["-q", "fit", "--bags", str(pipeline / "bags.csv"), "--tau", "0.75",
                 "--output-dir", str(out)]) == EXIT_OK
    target = tmp_path / "p.json"
    assert main(["-q", "params", "--curve", str(out / "curve_tau0_75.txt"),
                 "--output", str(target)]) == EXIT_OK
    doc = json.loads(target.read_text())
    fitted = json.loads((out / "params.json").read_text())["parameters"]["0.75"]
    assert doc["capacity"] == pytest.approx(fitted["capacity"])


def test_params_bad_curve(tmp_path):
    bad = tmp_path / "c.txt"
    bad.write_text("not a curve\n")
    assert main(["params", "--curve", str(bad)]) == EXIT_INPUT


def test_config_file_and_override(tmp_path, pipeline):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"bag": {"input": str(pipeline / "obs.csv"), "u": 5, "v": 5}}))
    out = tmp_path / "bags.csv"
    assert main(["-q", "--config", str(cfg), "bag", "--output", str(out)]) == EXIT_OK
    assert len(out.read_text().splitlines()) - 1 <= 25
    out2 = tmp_path / "bags2.csv"
    assert main(["-q", "--config", str(cfg), "bag", "--output", str(out2), "--u", "20"]) == EXIT_OK
    assert len(out2.read_text().splitlines()) > len(out.read_text().splitlines())


def test_config_errors(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"bag": {"colour": "red"}}))
    assert main(["--config", str(cfg), "bag", "--input", "a", "--output", "b"]) == EXIT_INPUT
    assert main(["--config", str(tmp_path / "none.json"), "bag", "--input", "a",
                 "--output", "b"]) == EXIT_INPUT


def test_compare_synthetic(tmp_path, capsys):
    out = tmp_path / "cmp"
    assert main(["compare", "--synthetic", "--seed", "7", "--output-dir", str(out)]) == EXIT_OK
    assert "PASS" in capsys.readouterr().out
    names = {p.name for p in out.iterdir()}
    assert {"report.csv", "report.json", "datasets.csv", "cdf_in_sample_mae.csv"} <= names
    doc = json.loads((out / "report.json").read_text())
    assert any(r["method"] == "CQRb@0.5" for r in doc["summary"])


def test_selftest(tmp_path):
    assert main(["-q", "selftest", "--output-dir", str(tmp_path / "st")]) == EXIT_OK
    assert (tmp_path / "st" / "fit" / "params.json").exists()


def test_fit_exact_data_zero_objective(tmp_path, capsys):
    k = np.linspace(2, 100, 40)
    q = np.minimum(80 * k, 2000 - 18.5 * (k - 25))
    obs = observations_from_arrays(k, q, datetime(2016, 3, 7, 6))
    path = tmp_path / "obs.csv"
    traffic.write_observations(path, obs)
    assert main(["fit", "--input", str(path), "--method", "cqr", "--tau", "0.5",
                 "--output-dir", str(tmp_path / "fit")]) == EXIT_OK
    line = next(s for s in capsys.readouterr().out.splitlines() if s.startswith("tau=0.5"))
    assert abs(float(line.split("objective=")[1].split()[0])) <= 1e-6
