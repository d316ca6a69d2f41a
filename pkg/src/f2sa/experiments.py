"""Sweep harness and the hard-instance audit.

A sweep runs every (solver order, target, seed) cell of an
:class:`ExperimentSpec` to first hit of ``||grad phi|| <= epsilon`` or to the
oracle budget, writes one trace CSV per cell plus a summary CSV and a JSON
manifest, and reports median oracle cost per (order, target).
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import platform
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .problems import PROBLEM_NAMES, HardInstanceParams, make_hard_instance, make_problem
from .problems.hard import masked_chain_grad, prog
from .oracles import Role
from .solvers import default_config, f2sa_p_run

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = ("p", "epsilon", "seed", "sfo_at_target", "hit")
MIN_AUDIT_SAMPLES = 10_000

# Multipliers on the rate-optimal schedule, shared by every order, that bring
# the unit-constant values to desk scale on the 5x5 tanh family with sigma = 1.
# c_eta_y * c_K = 1/2 keeps K * mu * eta_y near log(.)/2 for both orders.
DESK_MULTIPLIERS = {"c_nu": 40.0, "c_eta_x": 40.0, "c_eta_y": 1000.0, "c_K": 5e-4, "c_S": 0.02, "c_T": 100.0}
DESK_BUDGET = 2_000_000


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class SolverSpec:
    p: int
    overrides: dict = field(default_factory=dict)


@dataclass
class ExperimentSpec:
    problem: str
    solvers: list[SolverSpec]
    epsilons: list[float]
    seeds: list[int]
    out_dir: str = "."
    problem_seed: int = 0
    sigma: float = 1.0
    problem_kwargs: dict = field(default_factory=dict)
    budget: int | None = None
    format: str = "csv"

    def validate(self) -> None:
        if self.problem not in PROBLEM_NAMES:
            raise SpecError(f"unknown problem {self.problem!r}")
        if not self.solvers:
            raise SpecError("solver list is empty")
        if not self.seeds:
            raise SpecError("seed list is empty")
        if not self.epsilons or any(not e > 0 for e in self.epsilons):
            raise SpecError("epsilon targets must be a nonempty list of positive numbers")
        ps = [s.p for s in self.solvers]
        if len(set(ps)) != len(ps):
            raise SpecError("solver orders must be distinct (trace files are keyed by p)")
        if len(set(self.seeds)) != len(self.seeds):
            raise SpecError("seed list has duplicates")
        if self.budget is not None and self.budget < 1:
            raise SpecError("budget must be positive")
        if self.format not in ("csv", "json"):
            raise SpecError("format must be csv or json")
        out = Path(self.out_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise SpecError(f"cannot create output directory {out}: {exc}") from exc
        if not os.access(out, os.W_OK):
            raise SpecError(f"output directory {out} is not writable")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        solvers = [s if isinstance(s, SolverSpec) else SolverSpec(int(s["p"]), dict(s.get("overrides", {})))
                   for s in d.pop("solvers", [])]
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown spec fields: {sorted(unknown)}")
        return cls(solvers=solvers, **d)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentSpec":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class SweepRow:
    p: int
    epsilon: float
    seed: int
    sfo_at_target: int | None
    hit: bool
    status: str
    sfo_spent: int
    trace_file: str


@dataclass
class SweepResult:
    rows: list[SweepRow]
    summary_path: Path
    manifest_path: Path

    def medians(self) -> dict[tuple[int, float], float]:
        """Median oracle cost per (p, epsilon); a miss counts as +inf (censored at the budget)."""
        cells: dict[tuple[int, float], list[float]] = {}
        for r in self.rows:
            cells.setdefault((r.p, r.epsilon), []).append(math.inf if r.sfo_at_target is None else r.sfo_at_target)
        return {k: float(np.median(v)) for k, v in cells.items()}

    def hits(self) -> dict[tuple[int, float], int]:
        out: dict[tuple[int, float], int] = {}
        for r in self.rows:
            out[(r.p, r.epsilon)] = out.get((r.p, r.epsilon), 0) + int(r.hit)
        return out

    def median_table(self) -> str:
        hits = self.hits()
        lines = ["p,epsilon,median_sfo_at_target,hits,runs"]
        runs: dict[tuple[int, float], int] = {}
        for r in self.rows:
            runs[(r.p, r.epsilon)] = runs.get((r.p, r.epsilon), 0) + 1
        for (p, eps), med in sorted(self.medians().items()):
            lines.append(f"{p},{eps!r},{'inf' if math.isinf(med) else int(med)},{hits[(p, eps)]},{runs[(p, eps)]}")
        return "\n".join(lines)


def complexity_spec(out_dir: str, seeds=range(10), epsilons=(0.1, 0.03)) -> ExperimentSpec:
    """First- against second-order comparison on tanh coupling with unit noise."""
    solvers = [SolverSpec(p, dict(DESK_MULTIPLIERS)) for p in (1, 2)]
    return ExperimentSpec(problem="tanh", solvers=solvers, epsilons=list(epsilons), seeds=list(seeds),
                          out_dir=out_dir, sigma=1.0, budget=DESK_BUDGET)


def trace_name(problem: str, p: int, epsilon: float, seed: int) -> str:
    return f"{problem}_p{p}_eps{epsilon!r}_seed{seed}.csv"


def _code_version() -> str:
    from . import __version__

    return __version__


def run_sweep(spec: ExperimentSpec) -> SweepResult:
    """Run every (p, epsilon, seed) cell; budget exhaustion is recorded per row, never raised."""
    spec.validate()
    out = Path(spec.out_dir)
    problem = make_problem(spec.problem, sigma=spec.sigma, seed=spec.problem_seed, **spec.problem_kwargs)
    rows: list[SweepRow] = []
    runs = []
    for solver in sorted(spec.solvers, key=lambda s: s.p):
        for eps in spec.epsilons:
            for seed in spec.seeds:
                cfg = default_config(problem, eps, solver.p, solver.overrides, run_seed=seed)
                target = eps if problem.has_grad_phi else None
                tr = f2sa_p_run(problem, cfg, target=target, budget=spec.budget)
                name = trace_name(spec.problem, solver.p, eps, seed)
                (out / name).write_text(tr.to_csv())
                at = tr.first_hit(eps) if problem.has_grad_phi else None
                spent = tr.records[-1].sfo_total if tr.records else 0
                rows.append(SweepRow(solver.p, eps, seed, at, at is not None, tr.status, spent, name))
                runs.append({"trace": name, "status": tr.status, "config": cfg.to_dict(),
                             "best_grad_norm": tr.best_grad_norm, "iterations": len(tr)})
                log.info("p=%d eps=%g seed=%d status=%s sfo=%d", solver.p, eps, seed, tr.status, spent)

    summary = out / "summary.csv"
    with summary.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for r in rows:
            w.writerow([r.p, repr(r.epsilon), r.seed, "" if r.sfo_at_target is None else r.sfo_at_target,
                        str(r.hit).lower()])
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps({
        "spec": spec.to_dict(),
        "problem": problem.describe(),
        "runs": runs,
        "code_version": _code_version(),
        "numpy": np.__version__,
        "python": platform.python_version(),
    }, indent=2, default=_json_default) + "\n")
    return SweepResult(rows, summary, manifest)


def read_summary_csv(text: str) -> list[dict]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != SUMMARY_COLUMNS:
        raise ValueError(f"unexpected columns {reader.fieldnames}")
    return [{"p": int(r["p"]), "epsilon": float(r["epsilon"]), "seed": int(r["seed"]),
             "sfo_at_target": int(r["sfo_at_target"]) if r["sfo_at_target"] else None,
             "hit": r["hit"] == "true"} for r in reader]


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


# ---------------------------------------------------------------------------
# hard-instance audit


def _chain_point(rng, T: int) -> np.ndarray:
    """A chain argument whose progress index is uniform on 0..T."""
    m = int(rng.integers(0, T + 1))
    z = rng.uniform(-0.25, 0.25, T)
    if m:
        z[: m - 1] = rng.uniform(-2.0, 2.0, m - 1)
        z[m - 1] = rng.choice([-1.0, 1.0]) * rng.uniform(0.26, 2.0)
    return z


def _zero_chain_violations(rng, T: int, gamma: float, n: int) -> int:
    bad = 0
    for _ in range(n):
        z = _chain_point(rng, T) if rng.random() < 0.5 else rng.uniform(-2.0, 2.0, T)
        g = masked_chain_grad(z, bool(rng.random() < gamma), gamma)
        m = prog(z, 0.25)
        bad += int(np.count_nonzero(g[m + 1:]))
    return bad


def _progress_probe(problem, calls: int, rng) -> list[int]:
    """SGD on the hard instance's stochastic oracle; returns the call index of every progress increment.

    The step is scaled so that one revealed gradient coordinate moves the
    chain argument past the 1/4 threshold, making the oracle's masking the
    only thing that slows discovery down.
    """
    pr = problem.params
    eta = 0.5 * problem.gamma * 155.0 / pr.L1
    x = np.array(problem.x0, dtype=float)
    last, events = 0, []
    for k in range(calls):
        x = x - eta * problem.stochastic_grad(Role.UPPER_X, x, problem.y0, rng.random())
        m = prog(problem._inner(x)[1], 0.25)
        if m > last:
            events.extend([k + 1] * (m - last))
            last = m
        if m >= pr.T_chain:
            break
    return events


def _progress_stats(problem, repeats: int, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    cap = int(20 * problem.params.T_chain / problem.gamma) + 100
    gaps, complete = [], 0
    for _ in range(repeats):
        events = _progress_probe(problem, cap, rng)
        complete += int(len(events) >= problem.params.T_chain)
        gaps.extend(np.diff([0] + sorted(set(events))).tolist())
        # several coordinates found in one call count once, as one discovery event
    increments = len(gaps)
    mean_gap = float(np.mean(gaps)) if gaps else math.inf
    return {
        "gamma": problem.gamma,
        "repeats": repeats,
        "increments": increments,
        "complete_chains": complete,
        "mean_calls_between_increments": mean_gap,
        "expected_calls": 1.0 / problem.gamma,
        "ratio_to_expected": mean_gap * problem.gamma,
        "within_half_to_double": bool(0.5 <= mean_gap * problem.gamma <= 2.0),
    }


def audit_hard_instance(params: HardInstanceParams, n_samples: int = 100_000, *, n_points: int = 3,
                        seed: int = 0, probe_gamma: float | None = 0.01, probe_repeats: int = 20) -> dict:
    """Check the defining properties of the hard instance; violations are flagged, never raised.

    * unbiasedness of the masked oracle at ``n_points`` points (``n_samples`` calls each),
    * per-call variance against ``sigma**2`` (reported only),
    * zero-chain violations over ``n_samples`` sampled chain arguments,
    * exactness of the oracle when masking is off (``gamma = 1``),
    * progress statistics of an SGD probe at the instance's ``gamma`` and at ``probe_gamma``.
    """
    if n_samples < MIN_AUDIT_SAMPLES:
        raise ValueError(f"n_samples must be at least {MIN_AUDIT_SAMPLES}")
    pb = make_hard_instance(params)
    T, beta = params.T_chain, params.beta
    rng = np.random.default_rng(seed)

    points = []
    worst_ratio = 0.0
    unbiased = True
    for _ in range(n_points):
        w = _chain_point(rng, T)
        x = beta * (pb.U @ w)
        u = rng.random(n_samples)
        G = np.array([pb.stochastic_grad(Role.UPPER_X, x, pb.y0, s) for s in u])
        exact = pb.grad_f_U(x)
        dev = np.abs(G.mean(axis=0) - exact)
        tol = 4.0 * G.std(axis=0) / math.sqrt(n_samples) + 1e-12 * np.abs(exact)
        ok = bool(np.all(dev <= tol))
        unbiased &= ok
        ratio = float(np.max(dev / np.where(tol > 0, tol, np.inf)))
        worst_ratio = max(worst_ratio, ratio)
        var = float(np.mean(np.sum((G - exact) ** 2, axis=1)))
        points.append({
            "prog": prog(pb._inner(x)[1], 0.25),
            "max_abs_deviation": float(dev.max()),
            "max_deviation_over_tolerance": ratio,
            "unbiased": ok,
            "variance": var,
            "variance_over_sigma2": var / params.sigma**2 if params.sigma > 0 else None,
        })

    violations = _zero_chain_violations(rng, T, pb.gamma, n_samples)

    exact_pb = make_hard_instance(HardInstanceParams(**{**asdict(params), "gamma_override": 1.0}))
    gamma_one_err = 0.0
    for _ in range(100):
        x = beta * (exact_pb.U @ _chain_point(rng, T))
        g = exact_pb.stochastic_grad(Role.UPPER_X, x, exact_pb.y0, rng.random())
        gamma_one_err = max(gamma_one_err, float(np.max(np.abs(g - exact_pb.grad_f_U(x)))))

    progress = {"instance": _progress_stats(pb, probe_repeats, seed + 1)}
    if probe_gamma is not None:
        slow = make_hard_instance(HardInstanceParams(**{**asdict(params), "gamma_override": probe_gamma}))
        progress["probe"] = _progress_stats(slow, probe_repeats, seed + 2)

    return {
        "params": {**asdict(params), "gamma": pb.gamma, "beta": beta, "R_chain": params.R_chain},
        "n_samples": n_samples,
        "unbiasedness": {"points": points, "all_within_4_sigma": unbiased, "worst_ratio": worst_ratio},
        "variance": {"sigma2": params.sigma**2, "max_over_points": max(p["variance"] for p in points)},
        "zero_chain": {"points_checked": n_samples, "violations": violations},
        "gamma_one_max_abs_error": gamma_one_err,
        "progress": progress,
        "flags": {
            "zero_chain_ok": violations == 0,
            "unbiased_ok": unbiased,
            "gamma_one_exact": gamma_one_err <= 1e-12,
        },
    }
