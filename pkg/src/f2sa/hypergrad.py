"""Hyper-gradients: implicit-function closed form, finite-difference penalty estimator, brute-force reference."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse.linalg

from .findiff import DiffStencil, stencil as make_stencil
from .oracles import OracleCounter, Role, draw_block, stream
from .problems.base import BilevelProblem, InnerSolveStalled, NoSecondOrderAccess

__all__ = [
    "HypergradEstimate", "ErrorCurve", "IllConditioned", "MissingNode", "NuTooLarge",
    "NoSecondOrderAccess", "InnerSolveStalled", "OUTER_NODE",
    "analytic_hypergrad", "assemble_phi", "penalty_estimate", "fd_reference_hypergrad",
    "true_hypergrad", "estimator_error_curve",
]

DENSE_SOLVE_MAX_DIM = 500
# stencil_j label for the outer minibatch streams, which are shared by every node
OUTER_NODE = 0


class IllConditioned(RuntimeError):
    pass


class MissingNode(KeyError):
    pass


class NuTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class HypergradEstimate:
    vector: np.ndarray
    spacing_nu: float
    stencil_order: int
    sfo_cost: int


def analytic_hypergrad(problem: BilevelProblem, x, y=None) -> np.ndarray:
    """``grad_x f - H_xy (H_yy)^{-1} grad_y f`` at ``(x, y*(x))``."""
    x = np.asarray(x, dtype=float)
    if y is None:
        y = problem.y_star(x)
    H = problem.hess_yy_g(x, y)
    M = problem.hess_xy_g(x, y)
    rhs = problem.grad_fy(x, y)
    if problem.dim_y <= DENSE_SOLVE_MAX_DIM:
        try:
            v = scipy.linalg.cho_solve(scipy.linalg.cho_factor(H), rhs)
        except np.linalg.LinAlgError as exc:
            raise IllConditioned(str(exc)) from exc
    else:
        v, info = scipy.sparse.linalg.cg(H, rhs, rtol=1e-12, maxiter=10 * problem.dim_y)
        if info != 0:
            raise IllConditioned(f"conjugate gradients did not converge (info={info})")
    resid = np.linalg.norm(H @ v - rhs)
    if resid > 1e-8 * max(np.linalg.norm(rhs), np.finfo(float).tiny):
        raise IllConditioned(f"solve residual {resid:.3e} exceeds 1e-8 * ||rhs||")
    return problem.grad_fx(x, y) - M @ v


def true_hypergrad(problem: BilevelProblem, x) -> np.ndarray:
    """Closed-form ``grad phi`` where available, implicit-function formula otherwise."""
    if problem.has_grad_phi:
        return problem.grad_phi(x)
    return analytic_hypergrad(problem, x)


def assemble_phi(
    problem: BilevelProblem,
    st: DiffStencil,
    nu: float,
    x,
    y_solutions: Mapping[int, np.ndarray],
    S: int,
    run_seed: int = 0,
    outer_t: int = 0,
    counter: OracleCounter | None = None,
) -> HypergradEstimate:
    """Minibatch finite-difference hyper-gradient estimate.

    ``(1/S) sum_i sum_j w_j (j F_x(x, y^j; xi_i) + G_x(x, y^j; zeta_i) / nu)``
    with the same samples ``xi_i, zeta_i`` at every node ``j``. Oracle calls
    whose coefficient is exactly zero (``F_x`` at ``j = 0``) are not made.
    """
    if nu <= 0:
        raise ValueError("nu must be positive")
    if S < 1:
        raise ValueError("minibatch size must be >= 1")
    active = st.active
    missing = [j for j, _ in active if j not in y_solutions]
    if missing:
        raise MissingNode(f"no lower-level solution for nodes {missing}")
    x = np.asarray(x, dtype=float)
    if counter is None:
        counter = OracleCounter()
    before = counter.total

    xi = draw_block(problem, Role.UPPER_X, stream(run_seed, outer_t, OUTER_NODE, Role.UPPER_X), S)
    zeta = draw_block(problem, Role.LOWER_X, stream(run_seed, outer_t, OUTER_NODE, Role.LOWER_X), S)
    A = np.zeros((S, problem.dim_x))
    B = np.zeros((S, problem.dim_x))
    for j, w in active:
        y = y_solutions[j]
        if j != 0:
            A += (w * j) * np.array([problem.stochastic_grad(Role.UPPER_X, x, y, s) for s in xi])
            counter.add(Role.UPPER_X, S)
        B += w * np.array([problem.stochastic_grad(Role.LOWER_X, x, y, s) for s in zeta])
        counter.add(Role.LOWER_X, S)
    vec = A.sum(axis=0) / S + (B.sum(axis=0) / S) / nu
    return HypergradEstimate(vec, float(nu), st.order, counter.total - before)


def penalty_estimate(problem: BilevelProblem, st: DiffStencil, nu: float, x, y_solutions: Mapping[int, np.ndarray]) -> np.ndarray:
    """Noise-free version of :func:`assemble_phi`; ``nu`` may be negative (reflected stencil)."""
    x = np.asarray(x, dtype=float)
    a = np.zeros(problem.dim_x)
    b = np.zeros(problem.dim_x)
    for j, w in st.active:
        y = y_solutions[j]
        if j != 0:
            a += (w * j) * problem.grad_fx(x, y)
        b += w * problem.grad_gx(x, y)
    return a + b / nu


def fd_reference_hypergrad(problem: BilevelProblem, x, spacing: float = 1e-5) -> np.ndarray:
    """Central differences of ``phi(x) = f(x, y*(x))`` coordinate by coordinate."""
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    x = np.asarray(x, dtype=float)
    out = np.empty(problem.dim_x)
    for i in range(problem.dim_x):
        e = np.zeros(problem.dim_x)
        e[i] = spacing
        out[i] = (problem.phi(x + e) - problem.phi(x - e)) / (2.0 * spacing)
    return out


@dataclass(frozen=True)
class ErrorCurve:
    p: int
    nus: tuple[float, ...]
    errors: tuple[float, ...]
    floor: float
    slope: float | None

    @property
    def at_noise_floor(self) -> bool:
        """True when fewer than two errors clear the floor (estimator exact up to rounding)."""
        return self.slope is None

    def rows(self) -> list[tuple[float, float]]:
        return list(zip(self.nus, self.errors))


def estimator_error_curve(problem: BilevelProblem, x, p: int, nu_grid: Sequence[float],
                          exact_inner: bool = True) -> ErrorCurve:
    """``||Phi(nu) - grad phi(x)||`` over ``nu_grid`` with exact inner solutions and no noise.

    ``exact_inner=False`` replaces closed-form perturbed minimisers by a
    deterministic gradient-descent solve to residual ``1e-12 * mu``.
    """
    x = np.asarray(x, dtype=float)
    nus = np.asarray(nu_grid, dtype=float)
    limit = 1.0 / (2.0 * problem.kappa)
    if np.any(nus <= 0):
        raise ValueError("spacings must be positive")
    if np.any(nus > limit):
        raise NuTooLarge(f"nu must not exceed 1/(2 kappa) = {limit:.4g}")
    st = make_stencil(p)
    truth = true_hypergrad(problem, x)
    errors = []
    for nu in nus:
        if exact_inner:
            ys = {j: problem.y_star_nu(x, j * nu) for j, _ in st.active}
        else:
            from .problems.base import minimize_lower

            ys = {j: minimize_lower(problem, x, j * nu, problem.y0) for j, _ in st.active}
        errors.append(float(np.linalg.norm(penalty_estimate(problem, st, nu, x, ys) - truth)))
    errs = np.array(errors)
    floor = 1e-10 * (1.0 + float(np.linalg.norm(truth)))
    keep = errs > floor
    slope = None
    if keep.sum() >= 2:
        slope = float(np.polyfit(np.log(nus[keep]), np.log(errs[keep]), 1)[0])
    return ErrorCurve(p, tuple(float(v) for v in nus), tuple(errors), floor, slope)
