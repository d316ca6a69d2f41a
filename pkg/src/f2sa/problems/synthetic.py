"""Synthetic bilevel families with closed-form ``y*`` and hyper-gradient."""

from __future__ import annotations

import math

import numpy as np
from scipy.optimize import brentq

from .base import BilevelProblem

# max |d^2/dz^2 tanh(z)|
_TANH2_MAX = 4.0 / (3.0 * math.sqrt(3.0))
# h'(t) = 2t / (1 + t^2)^2 peaks at t = 1/sqrt(3)
_H_PRIME_MAX = (2.0 / math.sqrt(3.0)) / (4.0 / 3.0) ** 2


def h(x) -> float:
    x2 = np.square(x)
    return float(np.sum(x2 / (1.0 + x2)))


def grad_h(x) -> np.ndarray:
    return 2.0 * x / np.square(1.0 + np.square(x))


def _unit_spectral(m: np.ndarray) -> np.ndarray:
    nrm = np.linalg.norm(m, 2)
    return m / nrm if nrm > 0 else m


class LinearCoupling(BilevelProblem):
    """``f = h(x) + b.y``, ``g = mu/2 ||y - A x - y_shift||^2``.

    The hyper-objective is ``h(x) + b.(A x + y_shift)``, so ``phi`` is exactly
    linear in the penalty parameter and every finite-difference estimator is
    exact on this family.
    """

    name = "linear"
    has_grad_phi = True

    def __init__(self, A, b, y_shift, mu: float = 1.0, sigma: float = 0.0):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        dim_y, dim_x = A.shape
        self.A = A
        self.b = np.asarray(b, dtype=float).reshape(dim_y)
        self.y_shift = np.asarray(y_shift, dtype=float).reshape(dim_y)
        a_norm = np.linalg.norm(A, 2)
        smooth = (float(np.linalg.norm(self.b)), max(2.0, mu * (1.0 + a_norm**2)), 0.0)
        super().__init__(dim_x, dim_y, mu, smooth, sigma)

    def f(self, x, y):
        return h(x) + float(self.b @ y)

    def g(self, x, y):
        r = y - self.A @ x - self.y_shift
        return 0.5 * self.mu * float(r @ r)

    def grad_fx(self, x, y):
        return grad_h(x)

    def grad_fy(self, x, y):
        return self.b.copy()

    def grad_gx(self, x, y):
        return -self.mu * (self.A.T @ (y - self.A @ x - self.y_shift))

    def grad_gy(self, x, y):
        return self.mu * (y - self.A @ x - self.y_shift)

    def hess_yy_g(self, x, y):
        return self.mu * np.eye(self.dim_y)

    def hess_xy_g(self, x, y):
        return -self.mu * self.A.T

    def y_star_nu(self, x, nu, y_init=None, tol=None):
        return self.A @ x + self.y_shift - (nu / self.mu) * self.b

    def grad_phi(self, x):
        return grad_h(x) + self.A.T @ self.b

    @property
    def delta(self) -> float:
        # phi separates as sum_i h(x_i) + v_i x_i + const, v = A^T b; descend into the
        # local basin |x_i| < 1/sqrt(3) where h' is increasing
        v = self.A.T @ self.b
        gap = 0.0
        edge = 1.0 / math.sqrt(3.0)
        for vi in v:
            if vi == 0.0:
                continue
            if abs(vi) >= _H_PRIME_MAX:
                return math.inf
            t = brentq(lambda s: 2.0 * s / (1.0 + s * s) ** 2 + vi, -edge, edge)
            gap -= t * t / (1.0 + t * t) + vi * t
        return gap


def make_linear_coupling(dim_x: int, dim_y: int, mu: float = 1.0, sigma: float = 0.0, seed: int = 0) -> LinearCoupling:
    """Random linear-coupling instance with ``||A|| = 1``, ``||A^T b||_inf = 1/2``, ``||y_shift|| = 1``."""
    rng = np.random.default_rng(seed)
    A = _unit_spectral(rng.standard_normal((dim_y, dim_x)))
    b = rng.standard_normal(dim_y)
    v = np.abs(A.T @ b).max()
    if v > 0:
        b *= 0.5 / v
    y_shift = rng.standard_normal(dim_y)
    y_shift /= np.linalg.norm(y_shift)
    return LinearCoupling(A, b, y_shift, mu=mu, sigma=sigma)


class TanhCoupling(BilevelProblem):
    """``f = h(x) + c.y + ||y||^2/2``, ``g = mu/2 ||y||^2 - y.tanh(B x)``.

    ``y*(x) = tanh(Bx)/mu``. Every y-derivative of ``g`` beyond the second
    vanishes, so the family is smooth to any order in ``y``.
    """

    name = "tanh"
    has_grad_phi = True

    def __init__(self, B, c, mu: float = 1.0, sigma: float = 0.0, y_init=None):
        B = np.atleast_2d(np.asarray(B, dtype=float))
        dim_y, dim_x = B.shape
        self.B = B
        self.c = np.asarray(c, dtype=float).reshape(dim_y)
        b_norm = float(np.linalg.norm(B, 2))
        y_max = math.sqrt(dim_y) / mu
        smooth = (
            float(np.linalg.norm(self.c)) + y_max,
            max(2.0, mu + b_norm + _TANH2_MAX * b_norm**2 * y_max),
            _TANH2_MAX * b_norm**2,
        )
        super().__init__(dim_x, dim_y, mu, smooth, sigma)
        if y_init is not None:
            self.y0 = np.asarray(y_init, dtype=float).reshape(dim_y)

    def f(self, x, y):
        return h(x) + float(self.c @ y) + 0.5 * float(y @ y)

    def g(self, x, y):
        return 0.5 * self.mu * float(y @ y) - float(y @ np.tanh(self.B @ x))

    def grad_fx(self, x, y):
        return grad_h(x)

    def grad_fy(self, x, y):
        return self.c + y

    def grad_gx(self, x, y):
        th = np.tanh(self.B @ x)
        return -(self.B.T @ ((1.0 - th * th) * y))

    def grad_gy(self, x, y):
        return self.mu * y - np.tanh(self.B @ x)

    def hess_yy_g(self, x, y):
        return self.mu * np.eye(self.dim_y)

    def hess_xy_g(self, x, y):
        th = np.tanh(self.B @ x)
        return -(self.B.T * (1.0 - th * th))

    def y_star_nu(self, x, nu, y_init=None, tol=None):
        return (np.tanh(self.B @ x) - nu * self.c) / (self.mu + nu)

    def grad_phi(self, x):
        th = np.tanh(self.B @ x)
        return grad_h(x) + self.B.T @ ((1.0 - th * th) * (self.c + th / self.mu)) / self.mu

    @property
    def delta(self) -> float:
        # phi(0) = 0 and phi >= min over |y_i| <= 1/mu of c.y + |y|^2/2
        r = 1.0 / self.mu
        per = np.where(np.abs(self.c) <= r, 0.5 * self.c**2, np.abs(self.c) * r - 0.5 * r * r)
        return float(per.sum())


def make_tanh_coupling(dim_x: int, dim_y: int, mu: float = 1.0, sigma: float = 0.0, seed: int = 0) -> TanhCoupling:
    """Random tanh-coupling instance with ``||B|| = 1``, ``||c|| = 1`` and a unit-distance start."""
    rng = np.random.default_rng(seed)
    B = _unit_spectral(rng.standard_normal((dim_y, dim_x)))
    c = rng.standard_normal(dim_y)
    c /= np.linalg.norm(c)
    y_init = rng.standard_normal(dim_y)
    y_init /= np.linalg.norm(y_init)
    return TanhCoupling(B, c, mu=mu, sigma=sigma, y_init=y_init)
