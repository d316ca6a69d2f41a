"""First-derivative finite-difference stencils with exact rational weights.

Central stencils (even order ``p``) live on nodes ``-p/2..p/2`` with a zero
centre weight; forward stencils (odd ``p``) live on nodes ``0..p``. Weights
are obtained by solving a small Vandermonde system over :class:`fractions.Fraction`
so that every order condition holds exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

MAX_ORDER = 32


class StencilError(ValueError):
    """Base class for stencil construction errors."""


class OddOrder(StencilError):
    pass


class EvenOrder(StencilError):
    pass


class OrderTooLarge(StencilError):
    pass


class DuplicateNodes(StencilError):
    pass


class AllPointsAtNoiseFloor(StencilError):
    """Every probed error sits below the floating-point noise threshold."""


@dataclass(frozen=True)
class DiffStencil:
    """Nodes ``j`` and weights ``w_j`` such that ``sum_j w_j psi(j h) / h ~ psi'(0)``."""

    order: int
    nodes: tuple[int, ...]
    weights: tuple[Fraction, ...]

    @property
    def kind(self) -> str:
        return "central" if self.order % 2 == 0 else "forward"

    @property
    def float_weights(self) -> np.ndarray:
        return np.array([float(w) for w in self.weights])

    @property
    def active(self) -> list[tuple[int, float]]:
        """(node, weight) pairs with nonzero weight, in node order."""
        return [(j, float(w)) for j, w in zip(self.nodes, self.weights) if w != 0]

    def moment(self, k: int) -> Fraction:
        """Exact ``sum_j w_j j**k``."""
        return sum((w * Fraction(j) ** k for j, w in zip(self.nodes, self.weights)), Fraction(0))

    def apply(self, values: Sequence[float], h: float) -> float:
        """Combine samples ``values[i] = psi(nodes[i] * h)`` into a derivative estimate."""
        return float(np.dot(self.float_weights, np.asarray(values, dtype=float)) / h)


def solve_vandermonde_exact(
    nodes: Sequence[int],
    rhs: Sequence[Fraction | int],
    exponents: Sequence[int] | None = None,
) -> list[Fraction]:
    """Solve ``sum_k nodes[k]**exponents[i] * m[k] = rhs[i]`` exactly.

    ``exponents`` defaults to ``0, 1, ..., n-1``. Gaussian elimination is
    carried out in rational arithmetic, so the residual is exactly zero.
    """
    n = len(nodes)
    if len(rhs) != n:
        raise ValueError(f"rhs has length {len(rhs)}, expected {n}")
    if len(set(nodes)) != n:
        raise DuplicateNodes(f"nodes must be pairwise distinct, got {list(nodes)}")
    if exponents is None:
        exponents = range(n)
    exponents = list(exponents)
    if len(exponents) != n:
        raise ValueError(f"need {n} exponents, got {len(exponents)}")

    a = [[Fraction(x) ** e for x in nodes] + [Fraction(r)] for e, r in zip(exponents, rhs)]
    for col in range(n):
        pivot = next((r for r in range(col, n) if a[r][col] != 0), None)
        if pivot is None:
            # distinct nodes can still be singular for a bad exponent schedule (e.g. +-j with even powers)
            raise DuplicateNodes(f"singular system for nodes {list(nodes)} and exponents {exponents}")
        a[col], a[pivot] = a[pivot], a[col]
        for r in range(n):
            if r != col and a[r][col] != 0:
                factor = a[r][col] / a[col][col]
                a[r] = [vr - factor * vc for vr, vc in zip(a[r], a[col])]
    return [a[i][n] / a[i][i] for i in range(n)]


def central_coefficients(p: int) -> DiffStencil:
    """Order-``p`` central first-derivative stencil (``p`` even).

    Solves for ``m_j = j * a_j``, ``j = 1..p/2``, from
    ``sum_j m_j j**(2r) = 1/2 * [r == 0]`` for ``r = 0..p/2-1``, then
    antisymmetrises: ``a_{-j} = -a_j`` and ``a_0 = 0``.
    """
    if p % 2:
        raise OddOrder(f"central stencils need even order, got {p}")
    if p < 2:
        raise StencilError(f"order must be >= 2, got {p}")
    if p > MAX_ORDER:
        raise OrderTooLarge(f"order {p} exceeds {MAX_ORDER}")
    half = p // 2
    pos = list(range(1, half + 1))
    rhs = [Fraction(1, 2)] + [Fraction(0)] * (half - 1)
    m = solve_vandermonde_exact(pos, rhs, exponents=range(0, p, 2))
    alpha = {j: mj / j for j, mj in zip(pos, m)}
    nodes = tuple(range(-half, half + 1))
    weights = tuple(
        Fraction(0) if j == 0 else (alpha[j] if j > 0 else -alpha[-j]) for j in nodes
    )
    return DiffStencil(p, nodes, weights)


def forward_coefficients(p: int) -> DiffStencil:
    """Order-``p`` forward first-derivative stencil on ``0..p`` (``p`` odd)."""
    if p % 2 == 0:
        raise EvenOrder(f"forward stencils need odd order, got {p}")
    if p < 1:
        raise StencilError(f"order must be >= 1, got {p}")
    if p > MAX_ORDER - 1:
        raise OrderTooLarge(f"order {p} exceeds {MAX_ORDER - 1}")
    pos = list(range(1, p + 1))
    rhs = [Fraction(1)] + [Fraction(0)] * (p - 1)
    m = solve_vandermonde_exact(pos, rhs)
    beta = [mj / j for j, mj in zip(pos, m)]
    return DiffStencil(p, tuple(range(p + 1)), tuple([-sum(beta, Fraction(0))] + beta))


def stencil(p: int) -> DiffStencil:
    """Central stencil for even ``p``, forward stencil for odd ``p``."""
    return central_coefficients(p) if p % 2 == 0 else forward_coefficients(p)


def empirical_order(
    st: DiffStencil,
    probe: Callable[[float], float],
    derivative: float,
    spacings: Sequence[float],
) -> float:
    """Least-squares slope of log(error) against log(spacing).

    ``derivative`` is the exact value of ``probe'(0)``. Points whose error is
    at or below ``1e-12 * |probe'(0)|`` are dropped before the fit.
    """
    h = np.asarray(spacings, dtype=float)
    if h.size < 4:
        raise ValueError("need at least 4 spacings")
    if np.any(np.diff(h) >= 0):
        raise ValueError("spacings must be strictly decreasing")
    if np.any(h <= 0) or np.any(h > 1):
        raise ValueError("spacings must lie in (0, 1]")

    errors = np.array(
        [abs(st.apply([probe(j * hi) for j in st.nodes], hi) - derivative) for hi in h]
    )
    keep = errors > 1e-12 * abs(derivative)
    if keep.sum() < 2:
        raise AllPointsAtNoiseFloor(f"only {int(keep.sum())} of {h.size} errors above the noise floor")
    slope, _ = np.polyfit(np.log(h[keep]), np.log(errors[keep]), 1)
    return float(slope)
