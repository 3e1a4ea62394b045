"""
CLI・出力ファイル・参照APIのテスト
"""
import argparse
import csv
import json

import pytest
from fastapi.testclient import TestClient

from src.api import app
from src.cli import EXIT_CONFIG, EXIT_OK, main, parse_seeds
from src.database import get_db
from src.engine import run_dashboard_mechanism
from src.experiment import load_config
from src.utils.analysis import incentive_inconsistency, outstanding_balance, run_checks
from src.worker import ExperimentWorker


# ---- arguments ----------------------------------------------------------------

def test_parse_seeds():
    assert parse_seeds("3..7") == (3, 7)
    assert parse_seeds("4") == (4, 4)
    with pytest.raises(argparse.ArgumentTypeError):
        parse_seeds("7..3")
    with pytest.raises(argparse.ArgumentTypeError):
        parse_seeds("a..b")


def test_invalid_json_is_a_config_error(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{\n  \"name\": \n", encoding="utf-8")
    assert main(["run", str(path), "--out", str(tmp_path / "out"), "--quiet"]) == EXIT_CONFIG


def test_empty_agents_is_a_config_error(tmp_path):
    path = tmp_path / "empty.json"
    path.write_text(json.dumps({"name": "empty", "format": "all_pay", "vmax": 1.0, "stages": 3, "agents": []}))
    assert main(["run", str(path), "--out", str(tmp_path / "out"), "--quiet"]) == EXIT_CONFIG


def test_missing_config_is_a_config_error(tmp_path):
    assert main(["run", str(tmp_path / "nope.json"), "--quiet"]) == EXIT_CONFIG


# ---- run / sweep -------------------------------------------------------------------

def test_run_writes_outputs(tmp_path):
    out = tmp_path / "run"
    assert main(["run", "static-nash", "--out", str(out), "--quiet"]) == EXIT_OK
    for name in ("trace.csv", "trace.json", "metrics.csv", "report.md"):
        assert (out / name).exists()
    dumps = sorted((out / "dashboards").iterdir())
    assert len(dumps) == 20
    with open(out / "trace.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 20 * 2
    report = (out / "report.md").read_text(encoding="utf-8")
    assert "inferred value error from stage 2" in report
    assert "VIOLATED" not in report


def test_dashboard_dumps_reference_repeated_rules(tmp_path):
    out = tmp_path / "run"
    assert main(["run", "static-nash", "--out", str(out), "--quiet"]) == EXIT_OK
    first = json.loads((out / "dashboards" / "stage-000001.json").read_text())
    # stage 1 は全員が同じ線形ルール
    assert "knots" in first[0]
    assert first[1] == {"agent": 1, "id": first[0]["id"], "ref": True}


def test_reruns_are_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "static-nash-allpay", "--out", str(a), "--quiet"]) == EXIT_OK
    assert main(["run", "static-nash-allpay", "--out", str(b), "--quiet"]) == EXIT_OK
    for name in ("trace.csv", "trace.json", "metrics.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_sweep_writes_one_row_per_seed(tmp_path):
    out = tmp_path / "sweep"
    code = main(["sweep", "static-nash", "--seeds", "0..2", "--workers", "1", "--out", str(out), "--quiet"])
    assert code == EXIT_OK
    with open(out / "sweep.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert [int(r["seed"]) for r in rows] == [0, 1, 2]
    assert all(r["status"] == "ok" for r in rows)
    assert (out / "seed-2" / "trace.csv").exists()


# ---- api ---------------------------------------------------------------------------

@pytest.fixture
def client(session_factory, tmp_path):
    config = load_config("static-nash")
    trace = run_dashboard_mechanism(config)
    checks = run_checks(trace, config)
    result = ExperimentWorker._summarize(trace, config, checks)
    db = session_factory()
    try:
        ExperimentWorker.persist(db, trace, result, tmp_path / "run", sweep_name="nash-sweep")
    finally:
        db.close()

    def override():
        session = session_factory()
        try:
            yield session
        finally:
            session.close()

    app.dependency_overrides[get_db] = override
    try:
        yield TestClient(app)
    finally:
        app.dependency_overrides.clear()


def test_health(client):
    assert client.get("/api/health").json()["status"] == "ok"


def test_persisted_run_is_listed(client):
    runs = client.get("/api/runs").json()
    assert len(runs) == 1
    assert runs[0]["name"] == "static-nash"
    assert runs[0]["status"] == "ok"
    detail = client.get(f"/api/runs/{runs[0]['id']}").json()
    assert detail["config"]["vmax"] == 5.0
    assert client.get("/api/runs", params={"name": "other"}).json() == []


def test_run_metrics_and_stages(client):
    run_id = client.get("/api/runs").json()[0]["id"]
    metrics = client.get(f"/api/runs/{run_id}/metrics").json()
    assert metrics["stages"] == 20
    assert [a["agent"] for a in metrics["agents"]] == [0, 1]
    for a in metrics["agents"]:
        assert a["inconsistency"] == pytest.approx(abs(a["final_outstanding_balance"]) / 20)
    stages = client.get(f"/api/runs/{run_id}/stages", params={"agent": 1}).json()
    assert len(stages) == 20
    assert {s["agent"] for s in stages} == {1}
    assert stages[-1]["inferred_value"] == pytest.approx(1.7, abs=1e-5)


def test_run_metrics_match_trace_analysis(client):
    trace = run_dashboard_mechanism(load_config("static-nash"))
    final = outstanding_balance(trace)[-1]
    _, eps = incentive_inconsistency(trace)
    run_id = client.get("/api/runs").json()[0]["id"]
    for a in client.get(f"/api/runs/{run_id}/metrics").json()["agents"]:
        assert a["final_outstanding_balance"] == pytest.approx(final[a["agent"]], abs=1e-9)
        assert a["inconsistency"] == pytest.approx(eps[a["agent"]], abs=1e-12)


def test_reruns_are_listed_newest_first(client, session_factory, tmp_path):
    config = load_config("static-nash")
    trace = run_dashboard_mechanism(config)
    result = ExperimentWorker._summarize(trace, config, run_checks(trace, config))
    db = session_factory()
    try:
        rerun = ExperimentWorker.persist(db, trace, result, tmp_path / "rerun")
        rerun_id = rerun.id
    finally:
        db.close()
    runs = client.get("/api/runs", params={"name": "static-nash"}).json()
    assert [r["id"] for r in runs][0] == rerun_id
    assert len(runs) == 2 and runs[0]["seed"] == runs[1]["seed"]


def test_sweep_summary(client):
    body = client.get("/api/sweeps/nash-sweep").json()
    assert body["runs"] == 1
    assert body["violations"] == 0


def test_missing_resources_are_404(client):
    assert client.get("/api/runs/999").status_code == 404
    assert client.get("/api/runs/999/metrics").status_code == 404
    assert client.get("/api/sweeps/none").status_code == 404
