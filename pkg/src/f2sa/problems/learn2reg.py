"""Desk-scale learn-to-regularize: per-feature ridge weights for logistic regression."""

from __future__ import annotations

import math

import numpy as np
from scipy.special import expit

from .base import BilevelProblem

BOX = 2.0


class ScaleTooLarge(ValueError):
    pass


def _logistic_loss(A, t, w, y) -> float:
    z = t * (A @ y)
    return float(np.sum(w * np.logaddexp(0.0, -z)))


def _logistic_grad(A, t, w, y) -> np.ndarray:
    z = t * (A @ y)
    return -(A.T @ (w * t * expit(-z)))


def _logistic_hess(A, w, y) -> np.ndarray:
    s = expit(A @ y)
    return (A.T * (w * s * (1.0 - s))) @ A


class Learn2Reg(BilevelProblem):
    """``g = l_tr(y) + ||diag(exp(x)) y||^2``, ``f = l_val(y)``; ``x`` is kept in ``[-2, 2]^d``."""

    name = "learn2reg"
    has_grad_phi = False

    def __init__(self, A_tr, t_tr, A_val, t_val, sigma: float = 0.0, val_weight: float = 1.0):
        self.A_tr = np.asarray(A_tr, dtype=float)
        self.t_tr = np.asarray(t_tr, dtype=float)
        self.A_val = np.asarray(A_val, dtype=float)
        self.t_val = np.asarray(t_val, dtype=float)
        d = self.A_tr.shape[1]
        self.w_tr = np.full(self.A_tr.shape[0], 1.0 / self.A_tr.shape[0])
        self.w_val = np.full(self.A_val.shape[0], val_weight / self.A_val.shape[0])
        # logistic curvature is at most 1/4 per sample
        self._tr_curv = 0.25 * np.linalg.norm(self.A_tr, 2) ** 2 / self.A_tr.shape[0]
        val_curv = 0.25 * abs(val_weight) * np.linalg.norm(self.A_val, 2) ** 2 / self.A_val.shape[0]
        mu = 2.0 * math.exp(-2.0 * BOX)
        smooth = (
            abs(val_weight) * float(np.max(np.linalg.norm(self.A_val, axis=1))),
            max(self._tr_curv + 2.0 * math.exp(2.0 * BOX), val_curv),
            4.0 * math.exp(2.0 * BOX),
        )
        super().__init__(d, d, mu, smooth, sigma)

    def project(self, x):
        return np.clip(x, -BOX, BOX)

    def f(self, x, y):
        return _logistic_loss(self.A_val, self.t_val, self.w_val, y)

    def g(self, x, y):
        return _logistic_loss(self.A_tr, self.t_tr, self.w_tr, y) + float(np.sum(np.exp(2.0 * x) * y * y))

    def grad_fx(self, x, y):
        return np.zeros(self.dim_x)

    def grad_fy(self, x, y):
        return _logistic_grad(self.A_val, self.t_val, self.w_val, y)

    def grad_gx(self, x, y):
        return 2.0 * np.exp(2.0 * x) * y * y

    def grad_gy(self, x, y):
        return _logistic_grad(self.A_tr, self.t_tr, self.w_tr, y) + 2.0 * np.exp(2.0 * x) * y

    def hess_yy_g(self, x, y):
        return _logistic_hess(self.A_tr, self.w_tr, y) + np.diag(2.0 * np.exp(2.0 * x))

    def hess_xy_g(self, x, y):
        return np.diag(4.0 * np.exp(2.0 * x) * y)

    def lower_step(self, x):
        return 1.0 / (self._tr_curv + 2.0 * float(np.max(np.exp(2.0 * x))))

    @property
    def delta(self) -> float:
        # l_val >= 0
        return self.phi(self.x0)


def make_learn2reg(n_samples: int = 200, n_features: int = 10, n_val: int = 100, sigma: float = 0.0,
                   seed: int = 0, val_weight: float = 1.0) -> Learn2Reg:
    """Synthetic Gaussian binary classification with a sparse ground-truth direction."""
    if n_features > 200 or n_samples > 2000:
        raise ScaleTooLarge(f"desk scale is n_features <= 200, n_samples <= 2000; got {n_features}, {n_samples}")
    rng = np.random.default_rng(seed)
    w_true = rng.standard_normal(n_features)
    w_true[n_features // 2:] = 0.0

    def draw(n):
        A = rng.standard_normal((n, n_features))
        logits = A @ w_true
        t = np.where(rng.random(n) < expit(logits), 1.0, -1.0)
        return A, t

    A_tr, t_tr = draw(n_samples)
    A_val, t_val = draw(n_val)
    return Learn2Reg(A_tr, t_tr, A_val, t_val, sigma=sigma, val_weight=val_weight)
