"""Stochastic first-order oracle access, seeded sampling and SFO accounting.

Every stochastic draw is addressed by a :class:`SeedPath`. Draws along the
"row" axis of a path (``inner_k`` for y-roles, ``batch_i`` for x-roles) come
from one generator stream keyed by the remaining fields, so a block of rows
can be drawn at once and still agree bit-for-bit with single draws.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class DimensionMismatch(ValueError):
    pass


class Role(enum.IntEnum):
    """Which partial gradient an oracle call returns."""

    UPPER_Y = 0  # F_y ~ grad_y f
    LOWER_Y = 1  # G_y ~ grad_y g
    UPPER_X = 2  # F_x ~ grad_x f
    LOWER_X = 3  # G_x ~ grad_x g

    @property
    def is_upper(self) -> bool:
        return self in (Role.UPPER_X, Role.UPPER_Y)

    @property
    def is_x(self) -> bool:
        return self in (Role.UPPER_X, Role.LOWER_X)


class SeedPath(NamedTuple):
    run_seed: int
    outer_t: int
    stencil_j: int
    inner_k: int
    role: Role
    batch_i: int

    @property
    def row(self) -> int:
        return self.batch_i if Role(self.role).is_x else self.inner_k


def _zigzag(n: int) -> int:
    return 2 * n if n >= 0 else -2 * n - 1


def stream(run_seed: int, outer_t: int, stencil_j: int, role: Role, lane: int = 0) -> np.random.Generator:
    """Generator for one (run, t, j, role, lane) stream; rows are consecutive draws."""
    key = (_zigzag(outer_t), _zigzag(stencil_j), int(role), _zigzag(lane))
    ss = np.random.SeedSequence(entropy=int(run_seed) & (2**64 - 1), spawn_key=key)
    return np.random.Generator(np.random.PCG64(ss))


def _stream_for(path: SeedPath) -> np.random.Generator:
    role = Role(path.role)
    lane = path.inner_k if role.is_x else path.batch_i
    return stream(path.run_seed, path.outer_t, path.stencil_j, role, lane)


@dataclass
class OracleCounter:
    """Monotone tally of stochastic first-order oracle calls."""

    upper_calls: int = 0
    lower_calls: int = 0

    @property
    def total(self) -> int:
        return self.upper_calls + self.lower_calls

    def add(self, role: Role, n: int = 1) -> None:
        if n < 0:
            raise ValueError("oracle counts only increase")
        if Role(role).is_upper:
            self.upper_calls += n
        else:
            self.lower_calls += n

    def merge(self, other: "OracleCounter") -> None:
        """Fold in a per-worker counter."""
        self.upper_calls += other.upper_calls
        self.lower_calls += other.lower_calls

    def snapshot(self) -> tuple[int, int]:
        return self.upper_calls, self.lower_calls


def _check_point(problem, x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != (problem.dim_x,) or y.shape != (problem.dim_y,):
        raise DimensionMismatch(
            f"point has shapes {x.shape}, {y.shape}; problem wants ({problem.dim_x},), ({problem.dim_y},)"
        )
    return x, y


def draw_block(problem, role: Role, rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` consecutive noise samples for ``role`` from ``rng``."""
    return problem.draw_noise(rng, Role(role), n)


def sample_gradient(problem, point, role: Role, path: SeedPath, counter: OracleCounter | None = None) -> np.ndarray:
    """One unbiased stochastic partial gradient, fully determined by ``path``."""
    x, y = _check_point(problem, *point)
    role = Role(role)
    noise = draw_block(problem, role, _stream_for(path), path.row + 1)[path.row]
    if counter is not None:
        counter.add(role)
    return problem.stochastic_grad(role, x, y, noise)
