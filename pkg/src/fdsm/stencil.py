"""Finite-difference decomposition of T-th order directional derivatives.

A stencil is a set of evaluation offsets along a direction v plus solved
coefficients whose linear combination of function values reproduces the
T-th directional derivative up to a small-step error. Symmetric stencils
use K = ceil(T/2) positive offsets applied in +/- pairs (plus the center
point when T is even) and achieve an O(eps^2) error; general stencils use
T+1 arbitrary distinct offsets. Coefficients come from a Vandermonde
system solved exactly in rational arithmetic for small sizes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from fractions import Fraction
from math import ceil, factorial
from typing import Callable, Sequence

import numpy as np

from .counters import count_forward

__all__ = [
    "SymmetricStencil",
    "GeneralStencil",
    "StencilConditionWarning",
    "FdResult",
    "default_alphas",
    "solve_symmetric",
    "solve_general",
    "fd_directional",
]

RATIONAL_SOLVE_MAX = 8  # systems up to this size solve exactly in Fractions
CONDITION_WARN_THRESHOLD = 1e12


class StencilConditionWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SymmetricStencil:
    """Offsets {alpha_k} applied as x +/- alpha_k * v, with coefficients
    beta solving sum_k beta_k alpha_k^(2j-2) = [j == K] for j = 1..K."""

    order: int
    half_width: int
    alphas: tuple[float, ...]
    betas: tuple[float, ...]
    includes_center: bool
    residual: float

    @property
    def points_per_eval(self) -> int:
        return 2 * self.half_width + (1 if self.includes_center else 0)


@dataclass(frozen=True)
class GeneralStencil:
    """Offsets {gamma_i} applied as x + gamma_i * v, with coefficients
    beta solving sum_i beta_i gamma_i^t = [t == T] for t = 0..T."""

    order: int
    gammas: tuple[float, ...]
    betas: tuple[float, ...]
    residual: float

    @property
    def points_per_eval(self) -> int:
        return len(self.gammas)


@dataclass
class FdResult:
    """FD estimate of (v . grad)^T L, plus evaluation bookkeeping.

    `value` is the eps^T-scaled directional derivative, the form the
    training objectives consume; `raw_value` divides the scale back out
    to give d^T/dv^T, whose approximation error is the O(eps^2) one.
    """

    value: float
    order: int
    points_evaluated: int
    epsilon: float
    warning: str | None = None

    @property
    def raw_value(self) -> float:
        return self.value / self.epsilon**self.order

    def __float__(self) -> float:
        return float(self.value)


def default_alphas(order: int) -> tuple[float, ...]:
    """Small integer offsets 1..K keep the Vandermonde well conditioned."""
    return tuple(float(k) for k in range(1, ceil(order / 2) + 1))


def _solve_rational(nodes: Sequence[float], rhs_index: int) -> tuple[list[float], float]:
    """Solve sum_k beta_k * nodes_k^j = [j == rhs_index] for j = 0..n-1
    exactly in rational arithmetic. Returns (betas, residual=0)."""
    n = len(nodes)
    frac_nodes = [Fraction(x) for x in nodes]
    aug = [
        [fn**j for fn in frac_nodes] + [Fraction(1 if j == rhs_index else 0)]
        for j in range(n)
    ]
    for col in range(n):
        pivot = next(r for r in range(col, n) if aug[r][col] != 0)
        aug[col], aug[pivot] = aug[pivot], aug[col]
        inv = aug[col][col]
        aug[col] = [x / inv for x in aug[col]]
        for r in range(n):
            if r != col and aug[r][col] != 0:
                factor = aug[r][col]
                aug[r] = [a - factor * b for a, b in zip(aug[r], aug[col])]
    betas = [aug[r][n] for r in range(n)]
    residual = max(
        abs(sum(b * fn**j for b, fn in zip(betas, frac_nodes)) - (1 if j == rhs_index else 0))
        for j in range(n)
    )
    return [float(b) for b in betas], float(residual)


def _solve_float(nodes: Sequence[float], rhs_index: int) -> tuple[list[float], float]:
    n = len(nodes)
    m = np.vander(np.asarray(nodes, dtype=np.float64), n, increasing=True).T
    cond = np.linalg.cond(m)
    if cond > CONDITION_WARN_THRESHOLD:
        warnings.warn(
            f"stencil coefficient system is ill conditioned (cond ~ {cond:.2e}); "
            "coefficients solved in float arithmetic may be inaccurate",
            StencilConditionWarning,
        )
    rhs = np.zeros(n)
    rhs[rhs_index] = 1.0
    betas = np.linalg.solve(m, rhs)
    residual = float(np.max(np.abs(m @ betas - rhs)))
    return betas.tolist(), residual


def _solve_vandermonde(nodes: Sequence[float], rhs_index: int) -> tuple[list[float], float]:
    if len(nodes) <= RATIONAL_SOLVE_MAX:
        return _solve_rational(nodes, rhs_index)
    return _solve_float(nodes, rhs_index)


def solve_symmetric(order: int, alphas: Sequence[float] | None = None) -> SymmetricStencil:
    """Build the symmetric stencil for derivative order T >= 1.

    The half-width is K = ceil(T/2); `alphas` must then hold K distinct
    positive offsets (default 1..K). The coefficient system is the K x K
    Vandermonde in alpha^2 with unit last component.
    """
    order = int(order)
    if order < 1:
        raise ValueError(f"solve_symmetric: order must be >= 1, got {order}")
    k = ceil(order / 2)
    if alphas is None:
        alphas = default_alphas(order)
    alphas = tuple(float(a) for a in alphas)
    if len(alphas) != k:
        raise ValueError(
            f"solve_symmetric: order {order} needs K={k} offsets, got {len(alphas)}"
        )
    if any(a <= 0 for a in alphas):
        raise ValueError(f"solve_symmetric: offsets must be positive, got {alphas}")
    if len(set(alphas)) != k:
        raise ValueError(f"solve_symmetric: offsets must be distinct, got {alphas}")
    betas, residual = _solve_vandermonde([a * a for a in alphas], k - 1)
    return SymmetricStencil(
        order=order,
        half_width=k,
        alphas=alphas,
        betas=tuple(betas),
        includes_center=(order % 2 == 0),
        residual=residual,
    )


def solve_general(order: int, gammas: Sequence[float]) -> GeneralStencil:
    """Build a general stencil from T+1 distinct offsets."""
    order = int(order)
    if order < 1:
        raise ValueError(f"solve_general: order must be >= 1, got {order}")
    gammas = tuple(float(g) for g in gammas)
    if len(gammas) != order + 1:
        raise ValueError(
            f"solve_general: order {order} needs {order + 1} offsets, got {len(gammas)}"
        )
    if len(set(gammas)) != len(gammas):
        raise ValueError(f"solve_general: offsets must be distinct, got {gammas}")
    betas, residual = _solve_vandermonde(gammas, order)
    return GeneralStencil(order=order, gammas=gammas, betas=tuple(betas), residual=residual)


def _stencil_points(x: np.ndarray, v: np.ndarray, stencil) -> np.ndarray:
    if isinstance(stencil, SymmetricStencil):
        offsets = []
        for a in stencil.alphas:
            offsets.extend((a, -a))
        if stencil.includes_center:
            offsets.append(0.0)
    else:
        offsets = list(stencil.gammas)
    return np.stack([x + c * v for c in offsets], axis=0)


def _combine(values: np.ndarray, stencil) -> float:
    t = stencil.order
    if isinstance(stencil, SymmetricStencil):
        acc = 0.0
        for i, (a, b) in enumerate(zip(stencil.alphas, stencil.betas)):
            plus, minus = values[2 * i], values[2 * i + 1]
            if stencil.includes_center:
                acc += b / (a * a) * (plus + minus - 2.0 * values[-1])
            else:
                acc += b / a * (plus - minus)
        return factorial(t) / 2.0 * acc
    return factorial(t) * float(np.dot(stencil.betas, values))


def fd_directional(
    f: Callable[[np.ndarray], np.ndarray],
    x,
    v,
    stencil: SymmetricStencil | GeneralStencil,
    batched: bool = True,
) -> FdResult:
    """Estimate (v . grad)^T L(x) from function values alone.

    `v` carries the step: its norm is the expansion scale eps, and the
    returned value approximates the eps^T-scaled derivative (divide by
    eps^T for the raw d^T/dv^T). `f` maps a [P, ...] batch of points to
    [P] values; by default all shifted points go through one concatenated
    call, `batched=False` evaluates them one by one.
    """
    x = np.asarray(x, dtype=np.float64) if not isinstance(x, np.ndarray) else x
    v = np.asarray(v, dtype=x.dtype)
    if x.shape != v.shape:
        raise ValueError(f"fd_directional: x and v shapes differ: {x.shape} vs {v.shape}")
    eps = float(np.linalg.norm(v))
    if eps <= 0.0:
        raise ValueError("fd_directional: direction must have positive norm")

    points = _stencil_points(x, v, stencil)
    count_forward(len(points))
    if batched:
        values = np.asarray(f(points), dtype=np.float64).reshape(len(points))
    else:
        values = np.array(
            [float(np.asarray(f(p[None, ...])).reshape(())) for p in points]
        )

    warning = None
    if isinstance(stencil, SymmetricStencil) and stencil.includes_center:
        magnitude = abs(values[-1])
    else:
        magnitude = float(np.max(np.abs(values)))
    guard = 1e3 * float(np.finfo(x.dtype).eps) * (1.0 + magnitude)
    if eps < guard:
        warning = (
            f"step eps={eps:.3e} is below the cancellation guard {guard:.3e}; "
            "the difference is dominated by rounding"
        )

    return FdResult(
        value=float(_combine(values, stencil)),
        order=stencil.order,
        points_evaluated=len(points),
        epsilon=eps,
        warning=warning,
    )
