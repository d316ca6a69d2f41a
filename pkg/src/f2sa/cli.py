"""Command-line entry point: ``f2sa <subcommand>`` (or ``python -m f2sa``)."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .experiments import ExperimentSpec, SpecError, audit_hard_instance, run_sweep
from .findiff import StencilError, stencil
from .hypergrad import estimator_error_curve
from .problems import PROBLEM_NAMES, HardInstanceParams, make_problem
from .solvers import default_config, f2sa_p_run

log = logging.getLogger("f2sa")


def _parse_override(text: str) -> tuple[str, float | int]:
    key, sep, val = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    try:
        num = int(val) if key in ("S", "K", "T") else float(val)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"override {key!r} needs a number, got {val!r}") from exc
    return key, num


def _emit(text: str, path: str | None) -> None:
    if path in (None, "-"):
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    else:
        Path(path).write_text(text if text.endswith("\n") else text + "\n")


def _out_path(args, name: str | None) -> str | None:
    if name is None:
        return None
    p = Path(name)
    if not p.is_absolute() and args.out_dir:
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
        p = Path(args.out_dir) / p
    return str(p)


# -- subcommands ----------------------------------------------------------------


def cmd_coeffs(args) -> int:
    st = stencil(args.order)
    if args.format == "json":
        payload = {
            "order": st.order,
            "kind": st.kind,
            "nodes": list(st.nodes),
            "weights": [str(w) for w in st.weights],
            "decimal": [float(w) for w in st.weights],
        }
        _emit(json.dumps(payload), None)
    else:
        lines = ["node,weight,decimal"]
        lines += [f"{j},{w},{float(w)!r}" for j, w in zip(st.nodes, st.weights)]
        _emit("\n".join(lines), None)
    return 0


def cmd_check_order(args) -> int:
    pb = make_problem(args.problem, sigma=0.0, seed=args.seed)
    x = np.full(pb.dim_x, args.x_value)
    curve = estimator_error_curve(pb, x, args.p, args.nu_grid)
    if args.format == "json":
        text = json.dumps({"p": args.p, "slope": curve.slope, "floor": curve.floor,
                           "rows": [{"nu": n, "error": e} for n, e in curve.rows()]})
    else:
        text = "\n".join(["nu,error"] + [f"{n!r},{e!r}" for n, e in curve.rows()])
    _emit(text, _out_path(args, args.out))
    slope = "at noise floor" if curve.at_noise_floor else f"{curve.slope:.4f}"
    print(f"# p={args.p} log-log slope: {slope}", file=sys.stderr)
    return 0


def cmd_problem(args) -> int:
    pb = make_problem(args.name, sigma=args.sigma, seed=args.seed)
    _emit(json.dumps(pb.describe(), indent=2), None)
    return 0


def cmd_solve(args) -> int:
    pb = make_problem(args.problem, sigma=args.sigma, seed=args.problem_seed)
    cfg = default_config(pb, args.epsilon, args.p, dict(args.override or []), run_seed=args.seed)
    target = None if args.no_stop else args.epsilon
    tr = f2sa_p_run(pb, cfg, target=target, budget=args.budget, timing=args.timing)
    out = _out_path(args, args.out)
    _emit(tr.to_csv(), out)
    summary = {
        "status": tr.status,
        "iterations": len(tr),
        "sfo_total": tr.records[-1].sfo_total if tr.records else 0,
        "sfo_at_target": tr.first_hit(args.epsilon) if pb.has_grad_phi else None,
        "best_grad_norm": tr.best_grad_norm,
        "mean_grad_norm": tr.mean_grad_norm,
        "config": cfg.to_dict(),
        "problem": {"name": args.problem, "seed": args.problem_seed, "sigma": args.sigma},
    }
    if out not in (None, "-"):
        Path(out + ".json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary), file=sys.stderr)
    return 0


def cmd_sweep(args) -> int:
    spec = ExperimentSpec.from_json(Path(args.config).read_text())
    if args.out_dir is not None:
        spec.out_dir = args.out_dir
    if args.budget is not None:
        spec.budget = args.budget
    result = run_sweep(spec)
    table = result.median_table()
    if args.format == "json":
        med = [{"p": p, "epsilon": e, "median_sfo_at_target": None if math.isinf(m) else m}
               for (p, e), m in sorted(result.medians().items())]
        _emit(json.dumps({"summary": str(result.summary_path), "medians": med}), None)
    else:
        _emit(table, None)
    return 0


def cmd_audit_hard(args) -> int:
    params = HardInstanceParams(T_chain=args.T_chain, epsilon_target=args.epsilon, L1=args.L1, sigma=args.sigma,
                                seed=args.seed, gamma_override=args.gamma)
    report = audit_hard_instance(params, args.n_samples, seed=args.seed, probe_gamma=args.probe_gamma)
    text = json.dumps(report, indent=2)
    _emit(text, _out_path(args, args.out))
    flags = report["flags"]
    return 0 if all(flags.values()) else 1


# -- parser -----------------------------------------------------------------------


def _global_options(defaults: bool) -> argparse.ArgumentParser:
    # shared by the top-level parser and each subcommand, so global flags work in either position
    sup = None if defaults else argparse.SUPPRESS
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0 if defaults else sup, help="run / construction seed")
    p.add_argument("--out-dir", default=None if defaults else sup, help="directory for output files")
    p.add_argument("--format", choices=("csv", "json"), default="csv" if defaults else sup)
    p.add_argument("--budget", type=int, default=None if defaults else sup, help="oracle-call budget per run")
    p.add_argument("-v", "--verbose", action="store_true", default=False if defaults else sup)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="f2sa", description=__doc__, parents=[_global_options(True)])
    common = _global_options(False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("coeffs", parents=[common], help="print stencil nodes and weights")
    p.add_argument("--order", type=int, required=True)
    p.set_defaults(func=cmd_coeffs)

    p = sub.add_parser("check-order", parents=[common], help="estimator error against spacing")
    p.add_argument("--problem", choices=("linear", "tanh"), default="tanh")
    p.add_argument("--p", type=int, required=True)
    p.add_argument("--nu-grid", type=float, nargs="+", default=[2.0 ** -k for k in range(3, 9)])
    p.add_argument("--x-value", type=float, default=0.3, help="evaluate at x = (v, ..., v)")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_check_order)

    p = sub.add_parser("problem", parents=[common], help="problem utilities")
    psub = p.add_subparsers(dest="action", required=True)
    d = psub.add_parser("describe", parents=[common], help="print problem constants as JSON")
    d.add_argument("--name", choices=PROBLEM_NAMES, required=True)
    d.add_argument("--sigma", type=float, default=0.0)
    d.set_defaults(func=cmd_problem)

    p = sub.add_parser("solve", parents=[common], help="one solver run, trace CSV out")
    p.add_argument("--problem", choices=PROBLEM_NAMES, required=True)
    p.add_argument("--p", type=int, required=True)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--override", type=_parse_override, action="append", metavar="KEY=VALUE",
                   help="hyper-parameter value (nu, eta_x, ...) or multiplier (c_nu, c_K, ...)")
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--problem-seed", type=int, default=0)
    p.add_argument("--out", default="-")
    p.add_argument("--no-stop", action="store_true", help="keep going after the target is reached")
    p.add_argument("--timing", action="store_true", help="fill the wall_ms column (breaks byte-identical reruns)")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("sweep", parents=[common], help="run an experiment spec (JSON)")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("audit-hard", parents=[common], help="audit the hard instance")
    p.add_argument("--T-chain", type=int, default=10)
    p.add_argument("--epsilon", type=float, default=0.01)
    p.add_argument("--L1", type=float, default=1.0)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--gamma", type=float, default=None, help="override the masking probability")
    p.add_argument("--probe-gamma", type=float, default=0.01)
    p.add_argument("--n-samples", type=int, default=100_000)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_audit_hard)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (StencilError, SpecError, ValueError) as exc:
        print(f"f2sa: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
