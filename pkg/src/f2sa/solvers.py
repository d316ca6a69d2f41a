"""Double-loop fully first-order bilevel solvers and a deterministic reference."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable

import numpy as np

from .findiff import DiffStencil, stencil as make_stencil
from .hypergrad import OUTER_NODE, NuTooLarge, assemble_phi, true_hypergrad
from .oracles import OracleCounter, Role, draw_block, stream
from .problems.base import BilevelProblem

ZERO_GUARD = 1e-30
TRACE_COLUMNS = ("t", "sfo_total", "sfo_upper", "sfo_lower", "phi_norm", "grad_phi_norm", "wall_ms")


class StepsizeTooLarge(ValueError):
    pass


class NonFiniteIterate(FloatingPointError):
    pass


class DegenerateConstants(ValueError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    p: int
    nu: float
    eta_x: float
    eta_y: float
    S: int
    K: int
    T: int
    run_seed: int = 0
    constant_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("p must be >= 1")
        for name in ("nu", "eta_x", "eta_y"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("S", "K", "T"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def check_spacing(self, kappa: float) -> None:
        if self.nu > 1.0 / (2.0 * kappa):
            raise NuTooLarge(f"nu = {self.nu:.4g} exceeds 1/(2 kappa) = {1.0 / (2.0 * kappa):.4g}")

    def to_dict(self) -> dict:
        return asdict(self)


_FIELDS = ("nu", "eta_x", "eta_y", "S", "K", "T")
_MULTIPLIERS = tuple(f"c_{name}" for name in _FIELDS)


def default_hyperparams(delta: float, L1: float, L_bar: float, kappa: float, sigma: float, R: float,
                        epsilon: float, p: int, overrides: dict | None = None, run_seed: int = 0) -> SolverConfig:
    """Rate-optimal schedule with unit proportionality constants.

    ``overrides`` may carry multipliers ``c_nu, c_eta_x, c_eta_y, c_S, c_K, c_T``
    on each formula, or literal values for any field (``nu=...``, ``K=...``);
    literal values feed into the fields computed after them.
    """
    overrides = dict(overrides or {})
    unknown = set(overrides) - set(_FIELDS) - set(_MULTIPLIERS)
    if unknown:
        raise ValueError(f"unknown overrides: {sorted(unknown)}")
    for name, val in (("delta", delta), ("L1", L1), ("L_bar", L_bar), ("kappa", kappa), ("R", R), ("epsilon", epsilon)):
        if not val > 0 or not math.isfinite(val):
            raise DegenerateConstants(f"{name} = {val} must be positive and finite")
    if sigma < 0:
        raise DegenerateConstants("sigma must be nonnegative")
    mu = L_bar / kappa
    c = {m: float(overrides.get(m, 1.0)) for m in _MULTIPLIERS}

    def pick(name, value):
        return overrides[name] if name in overrides else value

    nu = min(R / kappa, (epsilon / (L_bar * kappa ** (2 * p + 1))) ** (1.0 / p))
    nu = pick("nu", min(c["c_nu"] * nu, 1.0 / (2.0 * kappa)))
    eta_x = pick("eta_x", c["c_eta_x"] * epsilon / (L1 * kappa**3))
    stable = 1.0 / (mu + L1)
    if sigma == 0:
        eta_y = pick("eta_y", min(c["c_eta_y"] * stable, stable))
        S = pick("S", 1)
        K = pick("K", math.ceil(c["c_K"] * math.log(max(R * L1 / (nu * epsilon), math.e)) / (mu * eta_y)))
    else:
        eta_y = pick("eta_y", min(c["c_eta_y"] * nu**2 * epsilon**2 / (L1 * kappa * sigma**2), stable))
        S = pick("S", math.ceil(c["c_S"] * sigma**2 / (nu * epsilon) ** 2))
        log_arg = max(R * L1 * kappa / (nu * epsilon), 1.0 / (nu * kappa**2), math.e)
        K = pick("K", math.ceil(c["c_K"] * (kappa * sigma / (nu * epsilon)) ** 2 * math.log(log_arg)))
    T = pick("T", math.ceil(c["c_T"] * delta / (eta_x * epsilon)))
    return SolverConfig(p=p, nu=float(nu), eta_x=float(eta_x), eta_y=float(eta_y), S=max(1, int(S)),
                        K=max(1, int(K)), T=max(1, int(T)), run_seed=run_seed, constant_overrides=overrides)


def default_config(problem: BilevelProblem, epsilon: float, p: int, overrides: dict | None = None,
                   run_seed: int = 0) -> SolverConfig:
    return default_hyperparams(problem.delta, problem.L1, problem.L_bar, problem.kappa, problem.sigma, problem.R,
                               epsilon, p, overrides=overrides, run_seed=run_seed)


# ---------------------------------------------------------------------------
# traces


@dataclass(frozen=True)
class TraceRecord:
    """Outer iteration ``t``: the estimate it built and the iterate ``x_{t+1}`` it produced."""

    t: int
    sfo_total: int
    sfo_upper: int
    sfo_lower: int
    phi_norm: float
    grad_phi_norm: float | None
    wall_ms: float | None
    x: tuple[float, ...]


@dataclass
class RunTrace:
    records: list[TraceRecord] = field(default_factory=list)
    status: str = "completed"
    grad_phi0: float | None = None
    x0: tuple[float, ...] = ()
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    @property
    def grad_norms(self) -> np.ndarray:
        return np.array([r.grad_phi_norm for r in self.records if r.grad_phi_norm is not None])

    @property
    def best_grad_norm(self) -> float | None:
        g = self.grad_norms
        return float(g.min()) if g.size else None

    @property
    def mean_grad_norm(self) -> float | None:
        g = self.grad_norms
        return float(g.mean()) if g.size else None

    def iterates(self) -> np.ndarray:
        return np.array([self.x0] + [r.x for r in self.records])

    def first_hit(self, epsilon: float) -> int | None:
        """Cumulative SFO count when ``||grad phi||`` first drops to ``epsilon``."""
        if self.grad_phi0 is not None and self.grad_phi0 <= epsilon:
            return 0
        for r in self.records:
            if r.grad_phi_norm is not None and r.grad_phi_norm <= epsilon:
                return r.sfo_total
        return None

    def same_as(self, other: "RunTrace") -> bool:
        """Bit-exact equality of everything except wall-clock timings."""
        strip = lambda tr: [replace(r, wall_ms=None) for r in tr.records]  # noqa: E731
        return (strip(self) == strip(other) and self.status == other.status
                and self.grad_phi0 == other.grad_phi0 and self.x0 == other.x0)

    def to_csv(self, fh=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in self.records:
            w.writerow([r.t, r.sfo_total, r.sfo_upper, r.sfo_lower, _fmt(r.phi_norm),
                        _fmt(r.grad_phi_norm), _fmt(r.wall_ms)])
        text = buf.getvalue()
        if fh is not None:
            fh.write(text)
        return text


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def read_trace_csv(lines: Iterable[str]) -> list[dict]:
    """Parse a trace CSV back into typed rows; raises ``ValueError`` on schema mismatch."""
    reader = csv.DictReader(lines)
    if tuple(reader.fieldnames or ()) != TRACE_COLUMNS:
        raise ValueError(f"unexpected columns {reader.fieldnames}")
    rows = []
    for row in reader:
        rows.append({
            "t": int(row["t"]),
            "sfo_total": int(row["sfo_total"]),
            "sfo_upper": int(row["sfo_upper"]),
            "sfo_lower": int(row["sfo_lower"]),
            "phi_norm": float(row["phi_norm"]),
            "grad_phi_norm": float(row["grad_phi_norm"]) if row["grad_phi_norm"] else None,
            "wall_ms": float(row["wall_ms"]) if row["wall_ms"] else None,
        })
    return rows


class _Recorder:
    def __init__(self, problem, counter, target, budget, timing):
        self.problem = problem
        self.counter = counter
        self.target = target
        self.budget = budget
        self.timing = timing
        self.start = time.perf_counter()
        self.trace = RunTrace()

    def grad_norm(self, x):
        # metrology only: never charged to the oracle counter
        if not self.problem.has_grad_phi:
            return None
        return float(np.linalg.norm(true_hypergrad(self.problem, x)))

    def begin(self, x) -> bool:
        self.trace.x0 = tuple(float(v) for v in x)
        self.trace.grad_phi0 = self.grad_norm(x)
        if self.target is not None and self.trace.grad_phi0 is not None and self.trace.grad_phi0 <= self.target:
            self.trace.status = "target_hit"
            return False
        return True

    def affordable(self, cost: int) -> bool:
        """False (and mark the run) when one more iteration of ``cost`` calls would overrun the budget."""
        if self.budget is not None and self.counter.total + cost > self.budget:
            self.trace.status = "budget_exhausted"
            return False
        return True

    def step(self, t, phi_norm, x) -> bool:
        g = self.grad_norm(x)
        wall = (time.perf_counter() - self.start) * 1e3 if self.timing else None
        up, lo = self.counter.snapshot()
        self.trace.records.append(TraceRecord(t, up + lo, up, lo, float(phi_norm), g, wall, tuple(float(v) for v in x)))
        if self.target is not None and g is not None and g <= self.target:
            self.trace.status = "target_hit"
            return False
        if self.budget is not None and up + lo >= self.budget:
            self.trace.status = "budget_exhausted"
            return False
        return True


def _nsgd_step(problem, x, phi, eta_x):
    nrm = float(np.linalg.norm(phi))
    if not math.isfinite(nrm):
        raise NonFiniteIterate("hyper-gradient estimate is not finite")
    if nrm <= ZERO_GUARD:
        return x, nrm
    return problem.project(x - eta_x * (phi / nrm)), nrm


# ---------------------------------------------------------------------------
# solvers


def inner_sgd(problem: BilevelProblem, x, j: int, nu: float, eta_y: float, K: int, warm,
              run_seed: int = 0, outer_t: int = 0, counter: OracleCounter | None = None) -> np.ndarray:
    """``K`` SGD steps on ``j nu f(x, .) + g(x, .)`` from ``warm`` with fresh samples per step."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if eta_y >= 2.0 / (problem.mu + problem.L1):
        raise StepsizeTooLarge(f"eta_y = {eta_y:.4g} must be below 2/(mu + L1) = {2.0 / (problem.mu + problem.L1):.4g}")
    x = np.asarray(x, dtype=float)
    y = np.array(warm, dtype=float)
    jn = j * nu
    lower = draw_block(problem, Role.LOWER_Y, stream(run_seed, outer_t, j, Role.LOWER_Y), K)
    upper = draw_block(problem, Role.UPPER_Y, stream(run_seed, outer_t, j, Role.UPPER_Y), K) if j else None
    for k in range(K):
        d = problem.stochastic_grad(Role.LOWER_Y, x, y, lower[k])
        if j:
            d = jn * problem.stochastic_grad(Role.UPPER_Y, x, y, upper[k]) + d
        y = y - eta_y * d
    if not np.all(np.isfinite(y)):
        raise NonFiniteIterate(f"inner iterate diverged at node {j}")
    if counter is not None:
        counter.add(Role.LOWER_Y, K)
        if j:
            counter.add(Role.UPPER_Y, K)
    return y


def f2sa_p_run(problem: BilevelProblem, config: SolverConfig, st: DiffStencil | None = None, *,
               target: float | None = None, budget: int | None = None, timing: bool = False) -> RunTrace:
    """Normalised outer steps on a ``p``-th order finite-difference hyper-gradient.

    Even ``p`` uses the central stencil (the ``j = 0`` chain is never solved),
    odd ``p`` the forward stencil on ``0..p``. Inner chains are warm-started
    from their previous outer iteration. The run stops on ``target`` (analytic
    ``||grad phi||``, not charged as oracle calls) or before an outer
    iteration that would push the call count past ``budget``.
    """
    if st is None:
        st = make_stencil(config.p)
    if st.order != config.p:
        raise ValueError(f"stencil order {st.order} does not match p = {config.p}")
    config.check_spacing(problem.kappa)
    nodes = [j for j, _ in st.active]
    counter = OracleCounter()
    rec = _Recorder(problem, counter, target, budget, timing)
    rec.trace.meta = {"solver": f"f2sa-{config.p}", "config": config.to_dict(), "nodes": nodes}
    x = np.array(problem.x0, dtype=float)
    warm = {j: np.array(problem.y0, dtype=float) for j in nodes}
    if not rec.begin(x):
        return rec.trace
    per_iter = (2 * len(nodes) - (0 in nodes)) * (config.K + config.S)
    for t in range(config.T):
        if not rec.affordable(per_iter):
            break
        for j in nodes:
            warm[j] = inner_sgd(problem, x, j, config.nu, config.eta_y, config.K, warm[j],
                                config.run_seed, t, counter)
        est = assemble_phi(problem, st, config.nu, x, warm, config.S, config.run_seed, t, counter)
        x, nrm = _nsgd_step(problem, x, est.vector, config.eta_x)
        if not rec.step(t, nrm, x):
            break
    return rec.trace


def f2sa2_run(problem: BilevelProblem, config: SolverConfig, *, target: float | None = None,
              budget: int | None = None, timing: bool = False) -> RunTrace:
    """Two-chain form of the second-order method.

    ``y`` minimises ``nu f + g`` and ``z`` minimises ``-nu f + g``; the estimate
    is ``(1/2) mean[F_x(y) + F_x(z) + (G_x(y) - G_x(z)) / nu]``. Seeds are laid
    out like the stencil form with ``y`` on node ``+1`` and ``z`` on ``-1``.
    """
    if config.p != 2:
        raise ValueError("the two-chain solver is the p = 2 method")
    config.check_spacing(problem.kappa)
    if config.eta_y >= 2.0 / (problem.mu + problem.L1):
        raise StepsizeTooLarge(f"eta_y = {config.eta_y:.4g} must be below 2/(mu + L1)")
    nu, eta_y, K, S, seed = config.nu, config.eta_y, config.K, config.S, config.run_seed
    counter = OracleCounter()
    rec = _Recorder(problem, counter, target, budget, timing)
    rec.trace.meta = {"solver": "f2sa-2-two-chain", "config": config.to_dict(), "nodes": [-1, 1]}
    x = np.array(problem.x0, dtype=float)
    y = np.array(problem.y0, dtype=float)
    z = np.array(problem.y0, dtype=float)
    if not rec.begin(x):
        return rec.trace
    grad = problem.stochastic_grad
    for t in range(config.T):
        if not rec.affordable(4 * (K + S)):
            break
        xi_y = draw_block(problem, Role.UPPER_Y, stream(seed, t, 1, Role.UPPER_Y), K)
        zeta_y = draw_block(problem, Role.LOWER_Y, stream(seed, t, 1, Role.LOWER_Y), K)
        xi_z = draw_block(problem, Role.UPPER_Y, stream(seed, t, -1, Role.UPPER_Y), K)
        zeta_z = draw_block(problem, Role.LOWER_Y, stream(seed, t, -1, Role.LOWER_Y), K)
        for k in range(K):
            y = y - eta_y * (nu * grad(Role.UPPER_Y, x, y, xi_y[k]) + grad(Role.LOWER_Y, x, y, zeta_y[k]))
        for k in range(K):
            z = z - eta_y * (-nu * grad(Role.UPPER_Y, x, z, xi_z[k]) + grad(Role.LOWER_Y, x, z, zeta_z[k]))
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(z))):
            raise NonFiniteIterate("inner iterate diverged")
        counter.add(Role.UPPER_Y, 2 * K)
        counter.add(Role.LOWER_Y, 2 * K)

        xi = draw_block(problem, Role.UPPER_X, stream(seed, t, OUTER_NODE, Role.UPPER_X), S)
        zeta = draw_block(problem, Role.LOWER_X, stream(seed, t, OUTER_NODE, Role.LOWER_X), S)
        Fy = np.array([grad(Role.UPPER_X, x, y, s) for s in xi])
        Fz = np.array([grad(Role.UPPER_X, x, z, s) for s in xi])
        Gy = np.array([grad(Role.LOWER_X, x, y, s) for s in zeta])
        Gz = np.array([grad(Role.LOWER_X, x, z, s) for s in zeta])
        counter.add(Role.UPPER_X, 2 * S)
        counter.add(Role.LOWER_X, 2 * S)
        phi = 0.5 * ((Fy + Fz).sum(axis=0) / S + ((Gy - Gz).sum(axis=0) / S) / nu)
        x, nrm = _nsgd_step(problem, x, phi, config.eta_x)
        if not rec.step(t, nrm, x):
            break
    return rec.trace


def oracle_gd_run(problem: BilevelProblem, eta: float, T: int, *, normalized: bool = False,
                  target: float | None = None) -> RunTrace:
    """Gradient descent on the true hyper-gradient (``normalized`` for NSGD steps); no oracle calls."""
    true_hypergrad(problem, problem.x0)  # raises NoSecondOrderAccess up front
    counter = OracleCounter()
    rec = _Recorder(problem, counter, target, None, False)
    rec.trace.meta = {"solver": "oracle-gd", "eta": eta, "T": T, "normalized": normalized}
    x = np.array(problem.x0, dtype=float)
    if not rec.begin(x):
        return rec.trace
    for t in range(T):
        g = true_hypergrad(problem, x)
        if normalized:
            x, nrm = _nsgd_step(problem, x, g, eta)
        else:
            nrm = float(np.linalg.norm(g))
            x = problem.project(x - eta * g)
        if not rec.step(t, nrm, x):
            break
    return rec.trace
