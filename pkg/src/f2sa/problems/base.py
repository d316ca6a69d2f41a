from __future__ import annotations

import math

import numpy as np

from ..oracles import Role


class NoSecondOrderAccess(RuntimeError):
    pass


class InnerSolveStalled(RuntimeError):
    pass


class BilevelProblem:
    """Oracle-facing bilevel instance ``min_x f(x, y*(x))``, ``y*(x) = argmin_y g(x, y)``.

    Subclasses supply ``f``, ``g`` and the four partial gradients. Second-order
    evaluators, ``y_star`` and ``grad_phi`` are optional; the defaults either
    raise or fall back to a deterministic inner solve.

    Stochastic oracles add isotropic Gaussian noise with total variance
    ``sigma**2`` (``sigma**2 / d`` per coordinate) unless overridden.
    """

    name = "problem"
    has_grad_phi = False

    def __init__(self, dim_x: int, dim_y: int, mu: float, smoothness, sigma: float):
        if dim_x < 1 or dim_y < 1:
            raise ValueError("dimensions must be positive")
        if mu <= 0:
            raise ValueError("mu must be positive")
        self.dim_x = int(dim_x)
        self.dim_y = int(dim_y)
        self.mu = float(mu)
        self.smoothness = tuple(float(v) for v in smoothness)
        self.sigma = float(sigma)
        self.x0 = np.zeros(self.dim_x)
        self.y0 = np.zeros(self.dim_y)

    # -- constants ---------------------------------------------------------
    @property
    def L1(self) -> float:
        return self.smoothness[1]

    @property
    def L_bar(self) -> float:
        return max(self.smoothness)

    @property
    def kappa(self) -> float:
        return self.L_bar / self.mu

    @property
    def delta(self) -> float:
        """Estimate of ``phi(x0) - inf phi``."""
        raise NotImplementedError

    @property
    def R(self) -> float:
        return float(np.linalg.norm(self.y0 - self.y_star(self.x0)))

    def describe(self) -> dict:
        return {
            "name": self.name,
            "dim_x": self.dim_x,
            "dim_y": self.dim_y,
            "mu": self.mu,
            "L": list(self.smoothness),
            "L_bar": self.L_bar,
            "kappa": self.kappa,
            "delta": self.delta,
            "R": self.R,
            "sigma": self.sigma,
        }

    # -- functions ---------------------------------------------------------
    def f(self, x, y) -> float:
        raise NotImplementedError

    def g(self, x, y) -> float:
        raise NotImplementedError

    def grad_fx(self, x, y) -> np.ndarray:
        raise NotImplementedError

    def grad_fy(self, x, y) -> np.ndarray:
        raise NotImplementedError

    def grad_gx(self, x, y) -> np.ndarray:
        raise NotImplementedError

    def grad_gy(self, x, y) -> np.ndarray:
        raise NotImplementedError

    def hess_yy_g(self, x, y) -> np.ndarray:
        raise NoSecondOrderAccess(f"{self.name} exposes no analytic Hessians")

    def hess_xy_g(self, x, y) -> np.ndarray:
        """Mixed block with shape ``(dim_x, dim_y)``."""
        raise NoSecondOrderAccess(f"{self.name} exposes no analytic Hessians")

    def grad(self, role: Role, x, y) -> np.ndarray:
        if role == Role.UPPER_X:
            return self.grad_fx(x, y)
        if role == Role.UPPER_Y:
            return self.grad_fy(x, y)
        if role == Role.LOWER_X:
            return self.grad_gx(x, y)
        return self.grad_gy(x, y)

    def project(self, x) -> np.ndarray:
        return x

    # -- lower level -------------------------------------------------------
    def y_star(self, x) -> np.ndarray:
        return self.y_star_nu(x, 0.0)

    def y_star_nu(self, x, nu: float, y_init=None, tol: float | None = None) -> np.ndarray:
        """Minimiser of ``nu * f(x, .) + g(x, .)`` by deterministic gradient descent."""
        return minimize_lower(self, x, nu, self.y0 if y_init is None else y_init, tol=tol)

    def lower_step(self, x) -> float:
        """Stable deterministic step size for the lower level at ``x``."""
        return 1.0 / (self.mu + self.L1)

    def phi(self, x) -> float:
        return self.f(x, self.y_star(x))

    def grad_phi(self, x) -> np.ndarray:
        raise NoSecondOrderAccess(f"{self.name} has no closed-form hyper-gradient")

    # -- stochastic oracle -------------------------------------------------
    def noise_dim(self, role: Role) -> int:
        return self.dim_x if Role(role).is_x else self.dim_y

    def draw_noise(self, rng: np.random.Generator, role: Role, n: int) -> np.ndarray:
        if self.sigma == 0.0:
            return np.zeros((n, 0))
        return rng.standard_normal((n, self.noise_dim(role)))

    def stochastic_grad(self, role: Role, x, y, sample) -> np.ndarray:
        grad = self.grad(role, x, y)
        if self.sigma == 0.0:
            return grad
        return grad + (self.sigma / math.sqrt(grad.shape[0])) * sample


def minimize_lower(problem: BilevelProblem, x, nu: float, y_init, tol: float | None = None,
                   max_iter: int = 200_000) -> np.ndarray:
    """Deterministic gradient descent on ``nu f(x, .) + g(x, .)`` to ``||grad|| <= tol``."""
    x = np.asarray(x, dtype=float)
    y = np.array(y_init, dtype=float)
    if tol is None:
        tol = 1e-12 * problem.mu
    step = problem.lower_step(x) / (1.0 + abs(nu) * problem.L1 / problem.mu)
    for _ in range(max_iter):
        d = problem.grad_gy(x, y)
        if nu:
            d = d + nu * problem.grad_fy(x, y)
        if np.linalg.norm(d) <= tol:
            return y
        y = y - step * d
    raise InnerSolveStalled(f"lower-level residual {np.linalg.norm(d):.3e} > {tol:.3e} after {max_iter} steps")
