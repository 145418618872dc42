"""Synthetic 2-D data distributions with analytic log-density and score.

Every kind exposes an exact score, so the Fisher divergence of a trained
model can be evaluated against the truth instead of a surrogate. The
checkerboard is replaced by a smooth mixture so the score exists
everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

__all__ = [
    "GaussianMixtureDensity",
    "TwoRingsDensity",
    "FisherEstimate",
    "make_density",
    "DATASET_NAMES",
    "fisher_divergence",
]


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


class GaussianMixtureDensity:
    """Isotropic Gaussian mixture: covers the unit Gaussian, the 8-mode
    circle, and the smoothed checkerboard."""

    def __init__(self, means, sigmas, weights=None, name="mixture"):
        self.means = np.asarray(means, dtype=np.float64)
        m = self.means.shape[0]
        self.sigmas = np.broadcast_to(np.asarray(sigmas, dtype=np.float64), (m,)).copy()
        if weights is None:
            weights = np.full(m, 1.0 / m)
        self.weights = np.asarray(weights, dtype=np.float64)
        self.weights = self.weights / self.weights.sum()
        self.name = name

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def sample(self, n: int, seed) -> np.ndarray:
        if n < 1:
            raise ValueError(f"sample: n must be >= 1, got {n}")
        rng = _as_rng(seed)
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        noise = rng.standard_normal((n, self.dim))
        return self.means[comp] + self.sigmas[comp, None] * noise

    def _component_logs(self, x: np.ndarray) -> np.ndarray:
        diff = x[:, None, :] - self.means[None, :, :]  # [n, m, d]
        sq = np.sum(diff**2, axis=-1)
        var = self.sigmas**2
        return (
            np.log(self.weights)[None, :]
            - 0.5 * sq / var[None, :]
            - self.dim * np.log(self.sigmas)[None, :]
            - 0.5 * self.dim * np.log(2 * np.pi)
        )

    def log_density(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return logsumexp(self._component_logs(x), axis=1)

    def score(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        logs = self._component_logs(x)
        resp = np.exp(logs - logsumexp(logs, axis=1, keepdims=True))  # [n, m]
        diff = x[:, None, :] - self.means[None, :, :]
        comp_scores = -diff / (self.sigmas**2)[None, :, None]
        return np.sum(resp[:, :, None] * comp_scores, axis=1)


class TwoRingsDensity:
    """Radially symmetric density concentrated on two circles."""

    def __init__(self, radii=(1.0, 2.0), width=0.1, weights=None, name="rings"):
        self.radii = np.asarray(radii, dtype=np.float64)
        self.width = float(width)
        if weights is None:
            weights = np.full(len(self.radii), 1.0 / len(self.radii))
        self.weights = np.asarray(weights, dtype=np.float64)
        self.weights = self.weights / self.weights.sum()
        self.name = name
        self.dim = 2

    def sample(self, n: int, seed) -> np.ndarray:
        if n < 1:
            raise ValueError(f"sample: n must be >= 1, got {n}")
        rng = _as_rng(seed)
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        radius = self.radii[comp] + self.width * rng.standard_normal(n)
        angle = rng.uniform(0.0, 2 * np.pi, size=n)
        return np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)

    def _radial_logs(self, u: np.ndarray) -> np.ndarray:
        return np.log(self.weights)[None, :] - 0.5 * (
            (u[:, None] - self.radii[None, :]) / self.width
        ) ** 2

    def log_density(self, x) -> np.ndarray:
        # unnormalized: constant offset is irrelevant for scores
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        u = np.linalg.norm(x, axis=1)
        return logsumexp(self._radial_logs(u), axis=1)

    def score(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        u = np.linalg.norm(x, axis=1)
        logs = self._radial_logs(u)
        resp = np.exp(logs - logsumexp(logs, axis=1, keepdims=True))
        dlog_du = np.sum(resp * (-(u[:, None] - self.radii[None, :]) / self.width**2), axis=1)
        return dlog_du[:, None] * x / u[:, None]


def _mog8() -> GaussianMixtureDensity:
    angles = 2 * np.pi * np.arange(8) / 8
    means = 2.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return GaussianMixtureDensity(means, 0.1, name="mog8")


def _checker() -> GaussianMixtureDensity:
    # smooth stand-in for a 4x4 checkerboard on [-2, 2]^2: one blob per
    # dark cell, wide enough that the score is tame between cells
    centers = [
        (-1.5 + i, -1.5 + j)
        for i in range(4)
        for j in range(4)
        if (i + j) % 2 == 0
    ]
    return GaussianMixtureDensity(np.array(centers), 0.25, name="checker")


_FACTORIES = {
    "gauss2": lambda: GaussianMixtureDensity(np.zeros((1, 2)), 1.0, name="gauss2"),
    "mog8": _mog8,
    "rings": lambda: TwoRingsDensity(),
    "checker": _checker,
}

DATASET_NAMES = tuple(sorted(_FACTORIES))


def make_density(name: str):
    try:
        return _FACTORIES[name]()
    except KeyError:
        raise ValueError(
            f"unknown dataset {name!r}; valid: {', '.join(DATASET_NAMES)}"
        ) from None


@dataclass
class FisherEstimate:
    """Monte-Carlo estimate of 0.5 E |score_fn(x) - true_score(x)|^2."""

    value: float
    std_error: float
    n: int

    def __float__(self) -> float:
        return self.value


def fisher_divergence(density, score_fn, n_eval: int, seed) -> FisherEstimate:
    if n_eval < 1:
        raise ValueError(f"fisher_divergence: n_eval must be >= 1, got {n_eval}")
    x = density.sample(n_eval, seed)
    diff = np.asarray(score_fn(x)) - density.score(x)
    per_sample = 0.5 * np.sum(diff**2, axis=-1)
    value = float(per_sample.mean())
    se = float(per_sample.std(ddof=1) / np.sqrt(n_eval)) if n_eval > 1 else 0.0
    return FisherEstimate(value=value, std_error=se, n=n_eval)
