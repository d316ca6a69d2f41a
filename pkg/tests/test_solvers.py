import io
import math

import numpy as np
import pytest

from f2sa.hypergrad import NuTooLarge
from f2sa.oracles import OracleCounter
from f2sa.problems import LinearCoupling, make_learn2reg, make_problem
from f2sa.solvers import (
    TRACE_COLUMNS,
    ZERO_GUARD,
    DegenerateConstants,
    SolverConfig,
    StepsizeTooLarge,
    _nsgd_step,
    default_config,
    default_hyperparams,
    f2sa2_run,
    f2sa_p_run,
    inner_sgd,
    oracle_gd_run,
    read_trace_csv,
)


def small_config(p, seed=0, **kw):
    base = dict(p=p, nu=0.05, eta_x=0.05, eta_y=0.1, S=3, K=4, T=6, run_seed=seed)
    base.update(kw)
    return SolverConfig(**base)


# -- configuration -----------------------------------------------------------

def test_unit_constants_example():
    cfg = default_hyperparams(1, 1, 1, 1, 1, 1, 0.1, 2)
    assert cfg.nu == pytest.approx(math.sqrt(0.1), rel=1e-12)
    assert cfg.eta_x == pytest.approx(0.1)
    assert cfg.eta_y == pytest.approx(0.1 * 0.01)
    assert cfg.S == math.ceil(1 / 0.001)


def test_spacing_is_clipped():
    cfg = default_hyperparams(1, 1, 4, 4, 1, 1, 0.1, 2, overrides={"c_nu": 100})
    assert cfg.nu == pytest.approx(1 / 8)


def test_deterministic_fallback():
    mu, L1 = 1.0, 3.0
    cfg = default_hyperparams(1.0, L1, L1, L1 / mu, 0.0, 1.0, 0.1, 2)
    eta = 1 / (mu + L1)
    assert cfg.S == 1 and cfg.eta_y == pytest.approx(eta)
    assert cfg.K == math.ceil(math.log(1.0 * L1 / (cfg.nu * 0.1)) / (mu * eta))


def test_eta_y_is_clipped_to_stability():
    cfg = default_hyperparams(1, 2, 2, 2, 1e-3, 1, 0.5, 2)
    assert cfg.eta_y == pytest.approx(1 / (1 + 2))


@pytest.mark.parametrize("eps", [0.5, 0.1, 0.01, 1e-3])
def test_second_order_spacing_is_larger(eps):
    for kappa in (1.0, 2.0, 5.0):
        n1 = default_hyperparams(1, kappa, kappa, kappa, 1, 10, eps, 1).nu
        n2 = default_hyperparams(1, kappa, kappa, kappa, 1, 10, eps, 2).nu
        assert n2 >= n1


def test_literal_overrides_feed_later_fields():
    cfg = default_hyperparams(1, 1, 1, 1, 1, 1, 0.1, 2, overrides={"nu": 0.2, "K": 7})
    assert cfg.nu == 0.2 and cfg.K == 7
    assert cfg.S == math.ceil(1 / (0.2 * 0.1) ** 2)
    with pytest.raises(ValueError):
        default_hyperparams(1, 1, 1, 1, 1, 1, 0.1, 2, overrides={"bogus": 1})


@pytest.mark.parametrize("bad", [dict(delta=0), dict(L1=-1), dict(R=0), dict(epsilon=0), dict(sigma=-1),
                                 dict(kappa=math.inf)])
def test_degenerate_constants(bad):
    args = dict(delta=1, L1=1, L_bar=1, kappa=1, sigma=1, R=1, epsilon=0.1, p=2)
    args.update(bad)
    with pytest.raises(DegenerateConstants):
        default_hyperparams(**args)


def test_config_validation():
    with pytest.raises(ValueError):
        small_config(0)
    with pytest.raises(ValueError):
        small_config(2, nu=0.0)
    with pytest.raises(ValueError):
        small_config(2, K=0)
    with pytest.raises(NuTooLarge):
        f2sa_p_run(make_problem("tanh"), small_config(2, nu=0.5))


# -- inner loop ------------------------------------------------------------------

def test_inner_single_step():
    pb = make_problem("tanh", seed=0)
    x = np.full(pb.dim_x, 0.2)
    y0 = np.ones(pb.dim_y)
    y = inner_sgd(pb, x, 1, 0.1, 0.2, 1, y0)
    expected = y0 - 0.2 * (0.1 * pb.grad_fy(x, y0) + pb.grad_gy(x, y0))
    assert np.array_equal(y, expected)


def test_inner_fixed_point():
    pb = make_problem("tanh", seed=1)
    x = np.full(pb.dim_x, -0.3)
    ys = pb.y_star_nu(x, -0.1)
    y = inner_sgd(pb, x, -1, 0.1, 0.2, 50, ys)
    assert np.allclose(y, ys, atol=1e-14)


def test_inner_contracts_and_warm_start_is_monotone():
    pb = make_problem("tanh", seed=2)
    x = np.full(pb.dim_x, 0.4)
    target = pb.y_star_nu(x, 0.05)
    y = pb.y0.copy()
    eta = 1 / (pb.mu + pb.L1)
    prev = np.linalg.norm(y - target)
    for t in range(10):
        y = inner_sgd(pb, x, 1, 0.05, eta, 3, y, outer_t=t)
        cur = np.linalg.norm(y - target)
        assert cur <= prev * (1 - pb.mu * eta / 2) ** 3 + 1e-15
        prev = cur


def test_inner_counts_and_skips_zero_node():
    pb = make_problem("tanh", sigma=1.0)
    c = OracleCounter()
    inner_sgd(pb, pb.x0, 0, 0.1, 0.1, 5, pb.y0, counter=c)
    assert c.snapshot() == (0, 5)
    inner_sgd(pb, pb.x0, 2, 0.1, 0.1, 5, pb.y0, counter=c)
    assert c.snapshot() == (5, 10)


def test_inner_rejects_unstable_step():
    pb = make_problem("tanh")
    with pytest.raises(StepsizeTooLarge):
        inner_sgd(pb, pb.x0, 1, 0.1, 2 / (pb.mu + pb.L1), 3, pb.y0)
    with pytest.raises(ValueError):
        inner_sgd(pb, pb.x0, 1, 0.1, 0.1, 0, pb.y0)


# -- outer loop ----------------------------------------------------------------

@pytest.mark.parametrize("p", [1, 2, 3, 4])
def test_normalised_step_length(p):
    pb = make_problem("tanh", sigma=1.0, seed=1)
    cfg = small_config(p, eta_x=0.03)
    tr = f2sa_p_run(pb, cfg)
    xs = tr.iterates()
    steps = np.linalg.norm(np.diff(xs, axis=0), axis=1)
    for r, s in zip(tr.records, steps):
        assert r.phi_norm > ZERO_GUARD
        assert s == pytest.approx(0.03, rel=1e-12)


def test_zero_guard_keeps_iterate():
    pb = make_problem("tanh")
    x = np.ones(pb.dim_x)
    new, nrm = _nsgd_step(pb, x, np.zeros(pb.dim_x), 0.1)
    assert np.array_equal(new, x) and nrm == 0.0


@pytest.mark.parametrize("p", [1, 2, 3, 4, 5, 6])
def test_sfo_per_iteration(p):
    pb = make_problem("tanh", sigma=1.0)
    cfg = small_config(p, nu=0.02, T=3)
    tr = f2sa_p_run(pb, cfg)
    active = p if p % 2 == 0 else p + 1
    upper_nodes = p
    per_upper = upper_nodes * (cfg.K + cfg.S)
    per_lower = active * (cfg.K + cfg.S)
    for i, r in enumerate(tr.records, start=1):
        assert (r.sfo_upper, r.sfo_lower) == (i * per_upper, i * per_lower)
    assert 0 not in tr.meta["nodes"] if p % 2 == 0 else 0 in tr.meta["nodes"]
    assert len(tr.meta["nodes"]) == active


def test_cumulative_sfo_strictly_increases():
    tr = f2sa_p_run(make_problem("linear", sigma=0.5), small_config(3))
    totals = [r.sfo_total for r in tr.records]
    assert all(b > a for a, b in zip(totals, totals[1:]))
    assert len(tr) <= 6


@pytest.mark.parametrize("name", ["tanh", "linear"])
@pytest.mark.parametrize("seed", range(3))
def test_two_chain_form_is_bit_identical(name, seed):
    pb = make_problem(name, sigma=1.0, seed=seed)
    cfg = small_config(2, seed=seed)
    assert f2sa2_run(pb, cfg).same_as(f2sa_p_run(pb, cfg))


def test_two_chain_needs_second_order():
    with pytest.raises(ValueError):
        f2sa2_run(make_problem("tanh"), small_config(1))


def test_seed_determinism():
    pb = make_problem("tanh", sigma=1.0, seed=4)
    a = f2sa_p_run(pb, small_config(3, seed=11))
    b = f2sa_p_run(make_problem("tanh", sigma=1.0, seed=4), small_config(3, seed=11))
    c = f2sa_p_run(pb, small_config(3, seed=12))
    assert a.same_as(b) and a.to_csv() == b.to_csv()
    assert not a.same_as(c)


def test_budget_and_target_stops():
    pb = make_problem("tanh", sigma=1.0)
    tr = f2sa_p_run(pb, small_config(2, T=100), budget=50)
    per_iter = 2 * 2 * (4 + 3)
    assert tr.status == "budget_exhausted"
    assert tr.records[-1].sfo_total <= 50 < tr.records[-1].sfo_total + per_iter
    assert f2sa_p_run(pb, small_config(2, T=100), budget=10).records == []
    hit = f2sa_p_run(pb, small_config(2, T=100), target=10.0)
    assert hit.status == "target_hit" and hit.records == [] and hit.first_hit(10.0) == 0
    done = f2sa_p_run(pb, small_config(2, T=4))
    assert done.status == "completed" and len(done) == 4


def test_trace_csv_roundtrip():
    tr = f2sa_p_run(make_problem("tanh", sigma=1.0), small_config(2))
    text = tr.to_csv()
    rows = read_trace_csv(io.StringIO(text))
    assert len(rows) == len(tr)
    assert text.splitlines()[0] == ",".join(TRACE_COLUMNS)
    for row, rec in zip(rows, tr.records):
        assert row["phi_norm"] == rec.phi_norm and row["grad_phi_norm"] == rec.grad_phi_norm
        assert row["wall_ms"] is None
    with pytest.raises(ValueError):
        read_trace_csv(io.StringIO("a,b\n1,2\n"))


def test_timing_column_is_opt_in():
    tr = f2sa_p_run(make_problem("tanh"), small_config(2, T=2), timing=True)
    assert all(r.wall_ms is not None and r.wall_ms >= 0 for r in tr.records)


def test_learn2reg_has_no_gradient_column():
    pb = make_learn2reg(n_samples=40, n_features=3, n_val=20, sigma=0.1)
    cfg = SolverConfig(p=2, nu=5e-5, eta_x=0.05, eta_y=0.5 / (pb.mu + pb.L1), S=2, K=5, T=3)
    tr = f2sa_p_run(pb, cfg)
    assert all(r.grad_phi_norm is None for r in tr.records)
    assert ",," in tr.to_csv() or tr.to_csv().splitlines()[1].endswith(",")


def test_zero_validation_weight_gives_zero_estimate():
    pb = make_learn2reg(n_samples=40, n_features=3, n_val=20, val_weight=0.0)
    cfg = SolverConfig(p=2, nu=5e-5, eta_x=0.05, eta_y=0.5 / (pb.mu + pb.L1), S=1, K=20, T=3)
    tr = f2sa_p_run(pb, cfg)
    assert all(r.phi_norm == 0.0 for r in tr.records)
    assert np.array_equal(tr.iterates()[-1], pb.x0)


# -- deterministic reference -----------------------------------------------------

def test_oracle_gd_monotone_on_linear():
    pb = make_problem("linear", seed=3)
    tr = oracle_gd_run(pb, 0.5, 30)  # h has a 2-Lipschitz gradient, so 1/L = 0.5
    phis = [pb.phi(x) for x in tr.iterates()]
    assert all(b <= a + 1e-15 for a, b in zip(phis, phis[1:]))


def test_oracle_gd_fixed_at_stationary_point():
    pb = LinearCoupling(np.eye(3), np.zeros(3), np.ones(3))
    tr = oracle_gd_run(pb, 0.5, 5)
    assert np.array_equal(tr.iterates()[-1], np.zeros(3))


def test_exact_inner_limit_matches_reference():
    pb = make_problem("tanh", seed=0)
    eta = 1 / (pb.mu + pb.L1)
    cfg = SolverConfig(p=2, nu=1e-4, eta_x=0.05, eta_y=eta, S=1, K=300, T=5)
    tr = f2sa_p_run(pb, cfg)
    ref = oracle_gd_run(pb, 0.05, 5, normalized=True)
    assert np.max(np.abs(tr.iterates() - ref.iterates())) <= 1e-3


def test_default_config_uses_problem_constants():
    pb = make_problem("tanh", sigma=1.0)
    cfg = default_config(pb, 0.1, 2, {"c_nu": 40}, run_seed=5)
    assert cfg.run_seed == 5 and cfg.nu <= 1 / (2 * pb.kappa) + 1e-15
    assert cfg.constant_overrides == {"c_nu": 40}
