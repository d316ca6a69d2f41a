"""Rotated zero-chain hard instance with a Bernoulli-masked stochastic gradient.

The upper level is the scaled chain function composed with a radial squash
``rho`` and a random rotation ``U``; the lower level is ``mu/2 y^2`` and does
not interact with ``x``. Only the upper x-gradient is stochastic: coordinates
past the current progress index are revealed with probability ``gamma`` and
rescaled by ``1/gamma`` to stay unbiased.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

from ..oracles import Role
from .base import BilevelProblem

L1_BAR = 155.0
LAMBDA = 0.2
_SQRT_E = math.sqrt(math.e)
_PHI_SCALE = _SQRT_E * math.sqrt(math.pi / 2.0)


class GammaOutOfRange(ValueError):
    pass


def psi(t):
    """0 for t <= 1/2, exp(1 - 1/(2t - 1)^2) otherwise."""
    t = np.asarray(t, dtype=float)
    live = t > 0.5
    d = np.where(live, 2.0 * t - 1.0, 1.0)
    out = np.where(live, np.exp(1.0 - 1.0 / (d * d)), 0.0)
    return out if out.ndim else float(out)


def psi_prime(t):
    t = np.asarray(t, dtype=float)
    live = t > 0.5
    d = np.where(live, 2.0 * t - 1.0, 1.0)
    out = np.where(live, np.exp(1.0 - 1.0 / (d * d)) * 4.0 / d**3, 0.0)
    return out if out.ndim else float(out)


def phi_cap(t):
    """sqrt(e) * int_{-inf}^t exp(-s^2/2) ds."""
    out = _PHI_SCALE * erfc(-np.asarray(t, dtype=float) / math.sqrt(2.0))
    return out if np.ndim(out) else float(out)


def phi_cap_prime(t):
    out = _SQRT_E * np.exp(-0.5 * np.square(np.asarray(t, dtype=float)))
    return out if np.ndim(out) else float(out)


def f_nc(x) -> float:
    """Zero-chain function ``-Psi(1) Phi(x_1) + sum_i [Psi(-x_{i-1}) Phi(-x_i) - Psi(x_{i-1}) Phi(x_i)]``."""
    x = np.asarray(x, dtype=float)
    val = -psi(1.0) * phi_cap(x[0])
    if x.size > 1:
        prev, cur = x[:-1], x[1:]
        val += float(np.sum(psi(-prev) * phi_cap(-cur) - psi(prev) * phi_cap(cur)))
    return float(val)


def grad_f_nc(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    g[0] = -psi(1.0) * phi_cap_prime(x[0])
    if x.size > 1:
        prev, cur = x[:-1], x[1:]
        g[1:] += -psi(-prev) * phi_cap_prime(-cur) - psi(prev) * phi_cap_prime(cur)
        g[:-1] += -psi_prime(-prev) * phi_cap(-cur) - psi_prime(prev) * phi_cap(cur)
    return g


def prog(x, alpha: float = 0.25) -> int:
    """Largest 1-based index with ``|x_i| > alpha``; 0 if there is none."""
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    idx = np.flatnonzero(np.abs(np.asarray(x, dtype=float)) > alpha)
    return int(idx[-1]) + 1 if idx.size else 0


def masked_chain_grad(z, xi: bool, gamma: float) -> np.ndarray:
    """``F_T(z)``: coordinates past ``prog_{1/4}(z)`` scaled by ``xi / gamma``."""
    g = grad_f_nc(z)
    m = prog(z, 0.25)
    g[m:] *= (1.0 / gamma) if xi else 0.0
    return g


def rho(w, radius: float) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    return w / math.sqrt(1.0 + float(w @ w) / radius**2)


def rho_jacobian(w, radius: float) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    s = math.sqrt(1.0 + float(w @ w) / radius**2)
    return np.eye(w.size) / s - np.outer(w, w) / (radius**2 * s**3)


def _rho_jvp(w, v, radius: float) -> np.ndarray:
    s = math.sqrt(1.0 + float(w @ w) / radius**2)
    return v / s - w * (float(w @ v) / (radius**2 * s**3))


@dataclass(frozen=True)
class HardInstanceParams:
    T_chain: int
    epsilon_target: float
    L1: float = 1.0
    sigma: float = 1.0
    mu: float = 1.0
    seed: int = 0
    gamma_override: float | None = None

    @property
    def L1_bar(self) -> float:
        return L1_BAR

    @property
    def beta(self) -> float:
        return 4.0 * L1_BAR * self.epsilon_target / self.L1

    @property
    def R_chain(self) -> float:
        return 230.0 * math.sqrt(self.T_chain)

    @property
    def lam(self) -> float:
        return LAMBDA

    @property
    def gamma(self) -> float:
        if self.gamma_override is not None:
            return float(self.gamma_override)
        if self.sigma == 0:
            return 1.0
        return min((46.0 * self.epsilon_target) ** 2 / self.sigma**2, 1.0)


def random_rotation(n: int, seed: int) -> np.ndarray:
    q, r = np.linalg.qr(np.random.default_rng(seed).standard_normal((n, n)))
    return q * np.sign(np.diag(r))


class HardInstance(BilevelProblem):
    """Separable instance ``f(x, y) = f_U(x)``, ``g(x, y) = mu y^2 / 2``."""

    name = "hard"
    has_grad_phi = True

    def __init__(self, params: HardInstanceParams):
        gamma = params.gamma
        if not 0.0 < gamma <= 1.0:
            raise GammaOutOfRange(f"gamma = {gamma} not in (0, 1]")
        if params.T_chain < 1:
            raise ValueError("chain length must be positive")
        self.params = params
        self.gamma = gamma
        self.U = random_rotation(params.T_chain, params.seed)
        super().__init__(params.T_chain, 1, params.mu, (0.0, max(params.L1, params.mu), 0.0), params.sigma)
        self.y0 = np.ones(1)
        self._scale = params.L1 / L1_BAR

    def _inner(self, x):
        w = self.U.T @ x / self.params.beta
        return w, rho(w, self.params.R_chain)

    def _assemble(self, x, w, chain_grad):
        pr = self.params
        return self._scale * (pr.beta * (self.U @ _rho_jvp(w, chain_grad, pr.R_chain)) + pr.lam * x)

    def f_U(self, x) -> float:
        _, z = self._inner(x)
        pr = self.params
        return self._scale * (pr.beta**2 * f_nc(z) + 0.5 * pr.lam * float(x @ x))

    def grad_f_U(self, x) -> np.ndarray:
        w, z = self._inner(x)
        return self._assemble(x, w, grad_f_nc(z))

    def stochastic_grad_f_U(self, x, xi: bool) -> np.ndarray:
        w, z = self._inner(x)
        return self._assemble(x, w, masked_chain_grad(z, xi, self.gamma))

    def f(self, x, y):
        return self.f_U(x)

    def g(self, x, y):
        return 0.5 * self.mu * float(y @ y)

    def grad_fx(self, x, y):
        return self.grad_f_U(x)

    def grad_fy(self, x, y):
        return np.zeros(1)

    def grad_gx(self, x, y):
        return np.zeros(self.dim_x)

    def grad_gy(self, x, y):
        return self.mu * np.asarray(y, dtype=float)

    def hess_yy_g(self, x, y):
        return np.array([[self.mu]])

    def hess_xy_g(self, x, y):
        return np.zeros((self.dim_x, 1))

    def y_star_nu(self, x, nu, y_init=None, tol=None):
        return np.zeros(1)

    def grad_phi(self, x):
        return self.grad_f_U(x)

    @property
    def delta(self) -> float:
        # the chain function drops by at most 12 per link from the origin
        pr = self.params
        return self._scale * pr.beta**2 * 12.0 * pr.T_chain

    def describe(self) -> dict:
        d = super().describe()
        pr = self.params
        d.update(T_chain=pr.T_chain, epsilon_target=pr.epsilon_target, L1_bar=L1_BAR,
                 beta=pr.beta, R_chain=pr.R_chain, lam=pr.lam, gamma=self.gamma)
        return d

    def draw_noise(self, rng, role, n):
        if Role(role) == Role.UPPER_X:
            return rng.random(n)
        return np.zeros((n, 0))

    def stochastic_grad(self, role, x, y, sample):
        if Role(role) == Role.UPPER_X:
            return self.stochastic_grad_f_U(np.asarray(x, dtype=float), bool(sample < self.gamma))
        return self.grad(role, x, y)


def make_hard_instance(params: HardInstanceParams) -> HardInstance:
    return HardInstance(params)
