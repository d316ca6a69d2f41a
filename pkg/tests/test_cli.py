import io
import json
from contextlib import redirect_stdout

import pytest

from f2sa.cli import build_parser, main
from f2sa.experiments import (
    ExperimentSpec,
    SolverSpec,
    SpecError,
    audit_hard_instance,
    read_summary_csv,
    run_sweep,
    trace_name,
)
from f2sa.problems import HardInstanceParams
from f2sa.solvers import read_trace_csv

FAST = {"nu": 0.05, "eta_x": 0.05, "eta_y": 0.1, "S": 2, "K": 5, "T": 8}


def run_cli(*argv):
    buf = io.StringIO()
    with redirect_stdout(buf):
        rc = main(list(argv))
    return rc, buf.getvalue()


def test_coeffs_csv_exact_fractions():
    rc, out = run_cli("coeffs", "--order", "4")
    assert rc == 0
    rows = [line.split(",") for line in out.strip().splitlines()[1:]]
    assert [r[1] for r in rows] == ["1/12", "-2/3", "0", "2/3", "-1/12"]
    assert [int(r[0]) for r in rows] == [-2, -1, 0, 1, 2]


def test_coeffs_json_and_global_flag_position():
    for argv in (("coeffs", "--order", "1", "--format", "json"), ("--format", "json", "coeffs", "--order", "1")):
        rc, out = run_cli(*argv)
        d = json.loads(out)
        assert rc == 0 and d["weights"] == ["-1", "1"] and d["nodes"] == [0, 1]


def test_coeffs_bad_order_is_an_error():
    rc, _ = run_cli("coeffs", "--order", "0")
    assert rc == 2


def test_check_order_csv(tmp_path):
    rc, _ = run_cli("--out-dir", str(tmp_path), "check-order", "--p", "2", "--nu-grid", "0.1", "0.05", "0.025",
                    "--out", "order.csv")
    lines = (tmp_path / "order.csv").read_text().strip().splitlines()
    assert rc == 0 and lines[0] == "nu,error" and len(lines) == 4


def test_problem_describe():
    rc, out = run_cli("problem", "describe", "--name", "tanh")
    d = json.loads(out)
    assert rc == 0 and {"dim_x", "mu", "L", "kappa", "delta"} <= set(d)


def test_solve_is_byte_identical(tmp_path):
    args = ["solve", "--problem", "tanh", "--p", "2", "--epsilon", "0.05", "--seed", "3"]
    for k, v in FAST.items():
        args += ["--override", f"{k}={v}"]
    run_cli(*args, "--out", str(tmp_path / "a.csv"))
    run_cli(*args, "--out", str(tmp_path / "b.csv"))
    a = (tmp_path / "a.csv").read_bytes()
    assert a == (tmp_path / "b.csv").read_bytes()
    rows = read_trace_csv(io.StringIO(a.decode()))
    assert 1 <= len(rows) <= FAST["T"]
    meta = json.loads((tmp_path / "a.csv.json").read_text())
    assert meta["config"]["constant_overrides"]["K"] == 5


def test_override_parsing():
    parser = build_parser()
    with pytest.raises(SystemExit):
        parser.parse_args(["solve", "--problem", "tanh", "--p", "2", "--epsilon", "0.1", "--override", "nu"])
    args = parser.parse_args(["solve", "--problem", "tanh", "--p", "2", "--epsilon", "0.1", "--override", "K=3"])
    assert args.override == [("K", 3)]


def fast_spec(tmp_path, **kw):
    base = dict(problem="tanh", solvers=[SolverSpec(1, FAST), SolverSpec(2, FAST)], epsilons=[0.3],
                seeds=[0, 1], out_dir=str(tmp_path), sigma=1.0)
    base.update(kw)
    return ExperimentSpec(**base)


def test_empty_seed_list_rejected_before_running(tmp_path):
    spec = fast_spec(tmp_path / "never", seeds=[])
    with pytest.raises(SpecError):
        run_sweep(spec)
    assert not (tmp_path / "never").exists() or not any((tmp_path / "never").iterdir())


@pytest.mark.parametrize("bad", [dict(solvers=[]), dict(epsilons=[]), dict(problem="nope"),
                                 dict(solvers=[SolverSpec(2), SolverSpec(2)]), dict(format="xml")])
def test_spec_validation(tmp_path, bad):
    with pytest.raises(SpecError):
        fast_spec(tmp_path, **bad).validate()


def test_sweep_outputs(tmp_path):
    res = run_sweep(fast_spec(tmp_path))
    rows = read_summary_csv(res.summary_path.read_text())
    assert len(rows) == 4
    for r in res.rows:
        trace = (tmp_path / trace_name("tanh", r.p, r.epsilon, r.seed)).read_text()
        parsed = read_trace_csv(io.StringIO(trace))
        assert r.hit == (r.sfo_at_target is not None)
        if r.hit:
            assert parsed == [] or parsed[-1]["sfo_total"] == r.sfo_at_target
    manifest = json.loads(res.manifest_path.read_text())
    assert manifest["spec"]["seeds"] == [0, 1] and len(manifest["runs"]) == 4
    assert set(res.medians()) == {(1, 0.3), (2, 0.3)}


def test_sweep_budget_misses_are_rows(tmp_path):
    slow = {**FAST, "T": 10_000}
    res = run_sweep(fast_spec(tmp_path, solvers=[SolverSpec(2, slow)], epsilons=[1e-6], budget=200))
    assert all(not r.hit and r.status == "budget_exhausted" for r in res.rows)
    assert all(m == float("inf") for m in res.medians().values())


def test_deterministic_sweep_rows_repeat(tmp_path):
    res = run_sweep(fast_spec(tmp_path, sigma=0.0, seeds=[0, 1, 2]))
    by_p = {}
    for r in res.rows:
        by_p.setdefault(r.p, set()).add((r.sfo_at_target, r.hit, r.status, r.sfo_spent))
    assert all(len(v) == 1 for v in by_p.values())


def test_spec_json_roundtrip(tmp_path):
    spec = fast_spec(tmp_path)
    again = ExperimentSpec.from_json(json.dumps(spec.to_dict()))
    assert again == spec
    with pytest.raises(SpecError):
        ExperimentSpec.from_dict({**spec.to_dict(), "extra": 1})


def test_sweep_command(tmp_path):
    cfg = tmp_path / "spec.json"
    cfg.write_text(json.dumps(fast_spec(tmp_path / "out").to_dict()))
    rc, out = run_cli("sweep", "--config", str(cfg))
    assert rc == 0 and out.startswith("p,epsilon,median_sfo_at_target")
    assert (tmp_path / "out" / "summary.csv").exists()


def test_audit_small():
    rep = audit_hard_instance(HardInstanceParams(T_chain=5, epsilon_target=0.01, sigma=1.0), 10_000,
                              n_points=1, probe_repeats=5)
    assert rep["flags"] == {"zero_chain_ok": True, "unbiased_ok": True, "gamma_one_exact": True}
    assert rep["progress"]["probe"]["within_half_to_double"]
    with pytest.raises(ValueError):
        audit_hard_instance(HardInstanceParams(T_chain=5, epsilon_target=0.01), 100)


def test_audit_gamma_one_progress_is_fast():
    rep = audit_hard_instance(HardInstanceParams(T_chain=5, epsilon_target=0.01, sigma=0.0), 10_000,
                              n_points=1, probe_gamma=None, probe_repeats=3)
    stats = rep["progress"]["instance"]
    assert stats["gamma"] == 1.0 and stats["mean_calls_between_increments"] <= 2.0
    assert rep["unbiasedness"]["points"][0]["variance"] == 0.0


def test_audit_command(tmp_path):
    rc, _ = run_cli("--out-dir", str(tmp_path), "audit-hard", "--T-chain", "4", "--n-samples", "10000",
                    "--out", "audit.json")
    rep = json.loads((tmp_path / "audit.json").read_text())
    assert rc == 0 and rep["zero_chain"]["violations"] == 0
