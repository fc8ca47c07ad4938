import csv
import hashlib
import io
import json
import subprocess
import sys
from pathlib import Path

import pytest

from opsec.cli import main
from opsec.routing import CSV_HEADER, load_graph

from oracles import enumerate_optimum

ROOT = Path(__file__).resolve().parents[1]
SCN = ROOT / "scenarios"
GR = ROOT / "graphs"
TOY = [str(GR / "toy.json"), "--legacy", str(GR / "toy_demands.json")]


def run(capsys, *argv):
    rc = main([str(a) for a in argv])
    out = capsys.readouterr()
    return rc, out.out, out.err


def test_handshake_trace(capsys):
    rc, out, _ = run(capsys, "handshake", SCN / "default.json")
    assert rc == 0
    assert "message order: OpsecHello ServDisc ObHello ServAnn ServReq ObReady" in out
    assert "= 3.5 RTT" in out and "outcome: ready" in out


def test_handshake_tamper_exits_1(capsys):
    rc, _, err = run(capsys, "handshake", SCN / "tamper.json")
    assert rc == 1 and "transcript tampered" in err


def test_handshake_bad_config_exits_2(capsys, tmp_path):
    rc, _, err = run(capsys, "handshake", SCN / "broken.json")
    assert rc == 2 and "colour" in err
    rc, _, _ = run(capsys, "handshake", tmp_path / "missing.json")
    assert rc == 2


def test_plan_toy_objective(capsys, tmp_path):
    sol, tun = tmp_path / "sol.json", tmp_path / "tun.csv"
    rc, out, _ = run(capsys, "plan", *TOY, "--opsec-ratio", "0.5", "--out", sol, "--tunnels", tun)
    assert rc == 0
    half = {("s", "t"): 2, ("t", "s"): 1}
    want = enumerate_optimum(load_graph(GR / "toy.json"), half, half, ["m"])
    doc = json.loads(sol.read_text())
    assert doc["objective"] == want == 18
    for d in doc["demands"]:
        for p in d["opsec"]:
            assert "m" in p["path"]
    assert tun.read_text().splitlines()[0] == "s,t,kind,path,volume"


def test_plan_ratio_zero_has_no_extra_tunnels(capsys, tmp_path):
    rc, _, _ = run(capsys, "plan", *TOY, "--out", tmp_path / "sol.json")
    doc = json.loads((tmp_path / "sol.json").read_text())
    assert rc == 0 and doc["tunnels"] == doc["baseline"] == 2


def test_plan_over_tight_exits_3(capsys):
    rc, _, err = run(capsys, "plan", str(GR / "toy_tight.json"), *TOY[1:], "--opsec-ratio", "0.5")
    assert rc == 3 and "infeasible" in err


def test_plan_usage_errors(capsys):
    assert run(capsys, "plan", GR / "toy.json")[0] == 2  # no matrix
    assert run(capsys, "plan", *TOY, "--boxes", "zz")[0] == 2


def test_sweep_header_and_empty_ratios(capsys, tmp_path):
    out = tmp_path / "s.csv"
    assert run(capsys, "sweep", *TOY, "--ratios", "", "--out", out)[0] == 0
    assert out.read_text() == ",".join(["box_count"] + CSV_HEADER) + "\n"
    assert CSV_HEADER == ["ratio", "objective", "tunnels", "baseline", "relative_increase_pct", "status"]


def test_sweep_rows(capsys, tmp_path):
    out = tmp_path / "s.csv"
    assert run(capsys, "sweep", *TOY, "--ratios", "0:0.5:0.25", "--boxes-sweep", "1", "--out", out)[0] == 0
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    assert [r["ratio"] for r in rows] == ["0", "0.25", "0.5"]
    assert rows[0]["relative_increase_pct"] == "0.0000"
    assert [int(r["tunnels"]) for r in rows] == sorted(int(r["tunnels"]) for r in rows)


def test_simulate_outputs(capsys, tmp_path):
    o, j, e = tmp_path / "m.csv", tmp_path / "m.json", tmp_path / "ev.ndjson"
    rc, _, _ = run(capsys, "simulate", SCN / "two_isps_nat.json", "--out", o, "--json", j, "--events", e)
    assert rc == 0
    rows = list(csv.DictReader(io.StringIO(o.read_text())))
    assert len(rows) == 30
    summary = json.loads(j.read_text())
    assert summary["event_digest"]
    events = [json.loads(x) for x in e.read_text().splitlines()]
    assert events and {"t_us", "event"} <= set(events[0])


def test_simulate_latency_sweep(capsys, tmp_path):
    o = tmp_path / "sweep.csv"
    assert run(capsys, "simulate", SCN / "scaling_sweep.json", "--out", o)[0] == 0
    rows = list(csv.DictReader(io.StringIO(o.read_text())))
    static = [float(r["p95_latency_ms"]) for r in rows if r["mode"] == "static"]
    dynamic = [float(r["p95_ratio"]) for r in rows if r["mode"] == "dynamic"]
    assert static == sorted(static) and max(dynamic) <= 2.0


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_determinism_subprocess(tmp_path):
    cmds = {
        "handshake": ["handshake", str(SCN / "default.json")],
        "simulate": ["simulate", str(SCN / "two_isps_nat.json"), "--out", "{o}"],
        "plan": ["plan", *TOY, "--opsec-ratio", "0.5", "--out", "{o}"],
        "sweep": ["sweep", *TOY, "--ratios", "0:0.5:0.25", "--boxes-sweep", "1,2", "--out", "{o}"],
    }
    for name, argv in cmds.items():
        seen = set()
        for k in range(3):
            o = tmp_path / f"{name}{k}.out"
            args = [a.replace("{o}", str(o)) for a in argv]
            p = subprocess.run([sys.executable, "-m", "opsec.cli", *args], capture_output=True, cwd=ROOT)
            assert p.returncode == 0, p.stderr
            seen.add(p.stdout + (o.read_bytes() if o.exists() else b""))
        assert len(seen) == 1, name
