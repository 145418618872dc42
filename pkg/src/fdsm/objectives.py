"""Score-matching training objectives, gradient-based and finite-difference.

Gradient-based losses (sm, dsm, dsm-sliced, ssm, ssmvr) compute projected
input-derivatives by nested reverse passes; their FD counterparts
(fd-ssm, fd-dsm, fd-ssmvr, plus the naive mpf reformulation) replace
every input-derivative with differences of plain energy evaluations,
issued as one concatenated batch. Every evaluation returns an
ObjectiveEstimate carrying the loss value, the differentiable loss node
(for the parameter gradient) and deterministic cost counters.

Conventions shared by all objectives: directions are uniform on the
radius-eps sphere, one draw per sample; per-sample losses are averaged
over the batch; the sliced losses divide by eps^2 so the direction scale
cancels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import (
    Tape,
    Tensor,
    add,
    concat,
    constant,
    gradient,
    leaf,
    mul,
    narrow,
    rowdot,
    scale,
    square,
    sub,
    tmean,
    tsum,
)
from .counters import EvalCounters, count_forward, counters_scope

__all__ = [
    "DirectionSample",
    "ObjectiveEstimate",
    "ZeroGradientError",
    "sample_direction",
    "parameter_gradients",
    "sm_exact",
    "dsm",
    "dsm_sliced",
    "ssm",
    "ssmvr",
    "fd_ssm",
    "fd_dsm",
    "fd_ssmvr",
    "mpf_naive",
    "grad_angle",
    "OBJECTIVE_NAMES",
    "objective_info",
    "evaluate_objective",
]


class ZeroGradientError(ValueError):
    """A gradient-angle comparison found a zero-norm parameter gradient."""

    def __init__(self, side: str):
        self.side = side
        super().__init__(f"parameter gradient of {side} has zero norm")


@dataclass(frozen=True)
class DirectionSample:
    """Per-row projection directions with a common radius epsilon."""

    v: np.ndarray  # [B, d], each row of norm epsilon
    epsilon: float

    def with_epsilon(self, epsilon: float) -> "DirectionSample":
        """Same unit directions, rescaled radius (for epsilon sweeps)."""
        unit = self.v / self.epsilon
        return DirectionSample(v=epsilon * unit, epsilon=float(epsilon))

    def negated(self) -> "DirectionSample":
        return DirectionSample(v=-self.v, epsilon=self.epsilon)


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def sample_direction(batch: int, dim: int, epsilon: float, rng) -> DirectionSample:
    """Uniform draws from the radius-epsilon sphere: normalized Gaussians."""
    if epsilon <= 0:
        raise ValueError(f"sample_direction: epsilon must be > 0, got {epsilon}")
    rng = _as_rng(rng)
    z = rng.standard_normal((batch, dim))
    v = epsilon * z / np.linalg.norm(z, axis=1, keepdims=True)
    return DirectionSample(v=v, epsilon=float(epsilon))


@dataclass
class ObjectiveEstimate:
    """One objective evaluation: scalar loss, its differentiable node,
    and the counters accumulated while producing (and later
    differentiating) it."""

    name: str
    value: float
    loss_node: Tensor | None
    counters: EvalCounters
    batch_size: int
    epsilon_used: float | None = None
    sigma_used: float | None = None

    def __float__(self) -> float:
        return self.value


def parameter_gradients(estimate: ObjectiveEstimate, params) -> list[np.ndarray]:
    """Backward pass from the loss to the model parameters. Runs inside
    the estimate's counter frame so its cost lands on the same record."""
    if estimate.loss_node is None:
        raise ValueError("estimate carries no differentiable loss node")
    with counters_scope(existing=estimate.counters):
        grads = gradient(estimate.loss_node, list(params), create_graph=False)
    return grads


def _prep(model, x, directions: DirectionSample | None):
    x = np.asarray(x, dtype=model.dtype)
    if directions is not None:
        v = np.asarray(directions.v, dtype=model.dtype)
        if v.shape != x.shape:
            raise ValueError(f"directions shape {v.shape} does not match batch {x.shape}")
        return x, v
    return x, None


# ----------------------------------------------------------------------
# gradient-based objectives


def sm_exact(model, x) -> ObjectiveEstimate:
    """Exact score matching: E[tr(grad s) + 0.5 |s|^2] with s the model
    score (grad of the energy, or the score network's output).

    The trace costs one derivative pass per input dimension, which is
    what makes this the evaluation metric rather than a training loss.
    """
    x, _ = _prep(model, x, None)
    b, d = x.shape
    is_energy = hasattr(model, "energy")
    with counters_scope() as counters:
        with Tape():
            xt = leaf(x, requires_grad=True, dtype=model.dtype)
            if is_energy:
                with Tape():
                    with Tape():
                        count_forward(b)
                        energy_sum = tsum(model.energy(xt))
                    s = gradient(energy_sum, xt)  # [B, d]
                    norm_sq = tsum(square(s), axis=-1)  # [B]
            else:
                with Tape():
                    count_forward(b)
                    s = model.score(xt)
                    norm_sq = tsum(square(s), axis=-1)
            trace = None
            for i in range(d):
                basis = np.zeros(d, dtype=model.dtype)
                basis[i] = 1.0
                u_i = gradient(tsum(mul(s, constant(basis))), xt)
                diag_i = tsum(mul(u_i, constant(basis)), axis=-1)
                trace = diag_i if trace is None else add(trace, diag_i)
            loss = tmean(add(trace, scale(norm_sq, 0.5)))
    return ObjectiveEstimate("sm", float(loss.value), loss, counters, b)


def ssm(model, x, directions: DirectionSample) -> ObjectiveEstimate:
    """Sliced score matching: (1/eps^2) E[v.Hv + 0.5 (v.grad)^2], with
    the Hessian-vector product from two nested reverse passes."""
    x, v = _prep(model, x, directions)
    b, _ = x.shape
    eps = directions.epsilon
    with counters_scope() as counters:
        with Tape():
            xt = leaf(x, requires_grad=True, dtype=model.dtype)
            vt = constant(v)
            with Tape():
                with Tape():
                    count_forward(b)
                    energy_sum = tsum(model.energy(xt))
                g = gradient(energy_sum, xt)
                gv = rowdot(g, vt)  # [B] = v . grad log p
            hv = gradient(tsum(gv), xt)  # [B, d] rows of H v
            quad = rowdot(hv, vt)
            loss = scale(tmean(add(quad, scale(square(gv), 0.5))), 1.0 / eps**2)
    return ObjectiveEstimate("ssm", float(loss.value), loss, counters, b, epsilon_used=eps)


def ssmvr(model, x, directions: DirectionSample) -> ObjectiveEstimate:
    """SSM with variance reduction for a direct score network:
    (1/eps^2) v.(J_s v) + (1/2d) |s|^2, using E[vv^T] = eps^2 I / d."""
    x, v = _prep(model, x, directions)
    b, d = x.shape
    eps = directions.epsilon
    with counters_scope() as counters:
        with Tape():
            xt = leaf(x, requires_grad=True, dtype=model.dtype)
            vt = constant(v)
            with Tape():
                count_forward(b)
                s = model.score(xt)  # [B, d]
                sv = tsum(rowdot(s, vt))
            u = gradient(sv, xt)  # [B, d] = J^T v; v.J^T v == v.J v
            quad = rowdot(u, vt)
            norm_term = scale(tsum(square(s), axis=-1), 1.0 / (2 * d))
            loss = tmean(add(scale(quad, 1.0 / eps**2), norm_term))
    return ObjectiveEstimate("ssmvr", float(loss.value), loss, counters, b, epsilon_used=eps)


def _perturb(x, sigma, rng, noise):
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    if noise is None:
        noise = _as_rng(rng).standard_normal(x.shape)
    noise = np.asarray(noise, dtype=x.dtype)
    return x + sigma * noise, noise


def dsm(model, x, sigma: float, rng=None, noise=None) -> ObjectiveEstimate:
    """Denoising score matching with Gaussian noise:
    (1/d) E |grad log p(x~) + (x~ - x)/sigma^2|^2."""
    x, _ = _prep(model, x, None)
    b, d = x.shape
    x_tilde, _ = _perturb(x, sigma, rng, noise)
    with counters_scope() as counters:
        with Tape():
            xt = leaf(x_tilde, requires_grad=True, dtype=model.dtype)
            with Tape():
                count_forward(b)
                energy_sum = tsum(model.energy(xt))
            g = gradient(energy_sum, xt)
            resid = add(g, constant((x_tilde - x) / sigma**2))
            loss = scale(tmean(tsum(square(resid), axis=-1)), 1.0 / d)
    return ObjectiveEstimate("dsm", float(loss.value), loss, counters, b, sigma_used=sigma)


def dsm_sliced(model, x, sigma: float, directions: DirectionSample,
               rng=None, noise=None) -> ObjectiveEstimate:
    """DSM projected on random directions:
    (1/eps^2) E[(v.grad log p(x~) + v.(x~ - x)/sigma^2)^2].
    This is the exact gradient-based counterpart of fd-dsm."""
    x, v = _prep(model, x, directions)
    b, _ = x.shape
    eps = directions.epsilon
    x_tilde, _ = _perturb(x, sigma, rng, noise)
    with counters_scope() as counters:
        with Tape():
            xt = leaf(x_tilde, requires_grad=True, dtype=model.dtype)
            vt = constant(v)
            with Tape():
                count_forward(b)
                energy_sum = tsum(model.energy(xt))
            g = gradient(energy_sum, xt)
            shift = constant(np.sum(v * (x_tilde - x), axis=-1) / sigma**2)
            loss = scale(tmean(square(add(rowdot(g, vt), shift))), 1.0 / eps**2)
    return ObjectiveEstimate("dsm-sliced", float(loss.value), loss, counters, b,
                             epsilon_used=eps, sigma_used=sigma)


# ----------------------------------------------------------------------
# finite-difference objectives (no input-derivative passes)


def fd_ssm(model, x, directions: DirectionSample) -> ObjectiveEstimate:
    """FD form of SSM from three energy evaluations per sample:
    (1/eps^2) E[L(x+v) + L(x-v) - 2 L(x) + (L(x+v) - L(x-v))^2 / 8]."""
    x, v = _prep(model, x, directions)
    b, _ = x.shape
    eps = directions.epsilon
    with counters_scope() as counters:
        with Tape():
            count_forward(3 * b)
            cat = constant(np.concatenate([x, x + v, x - v], axis=0))
            e = model.energy(cat)
            e0 = narrow(e, 0, b)
            e_plus = narrow(e, b, 2 * b)
            e_minus = narrow(e, 2 * b, 3 * b)
            second = add(add(e_plus, e_minus), scale(e0, -2.0))
            first_sq = square(sub(e_plus, e_minus))
            loss = scale(tmean(add(second, scale(first_sq, 0.125))), 1.0 / eps**2)
    return ObjectiveEstimate("fd-ssm", float(loss.value), loss, counters, b, epsilon_used=eps)


def fd_dsm(model, x, sigma: float, directions: DirectionSample,
           rng=None, noise=None) -> ObjectiveEstimate:
    """FD form of sliced DSM from two energy evaluations per sample:
    (1/4 eps^2) E[(L(x~+v) - L(x~-v) + 2 v.(x~-x)/sigma^2)^2]."""
    x, v = _prep(model, x, directions)
    b, _ = x.shape
    eps = directions.epsilon
    x_tilde, _ = _perturb(x, sigma, rng, noise)
    with counters_scope() as counters:
        with Tape():
            count_forward(2 * b)
            cat = constant(np.concatenate([x_tilde + v, x_tilde - v], axis=0))
            e = model.energy(cat)
            e_plus = narrow(e, 0, b)
            e_minus = narrow(e, b, 2 * b)
            shift = constant(2.0 * np.sum(v * (x_tilde - x), axis=-1) / sigma**2)
            inner = add(sub(e_plus, e_minus), shift)
            loss = scale(tmean(square(inner)), 1.0 / (4 * eps**2))
    return ObjectiveEstimate("fd-dsm", float(loss.value), loss, counters, b,
                             epsilon_used=eps, sigma_used=sigma)


def fd_ssmvr(model, x, directions: DirectionSample) -> ObjectiveEstimate:
    """FD form of SSMVR from two score evaluations per sample:
    E[ |s(x+v) + s(x-v)|^2 / 8d + (v.s(x+v) - v.s(x-v)) / 2 eps^2 ]."""
    x, v = _prep(model, x, directions)
    b, d = x.shape
    eps = directions.epsilon
    with counters_scope() as counters:
        with Tape():
            count_forward(2 * b)
            cat = constant(np.concatenate([x + v, x - v], axis=0))
            s = model.score(cat)
            s_plus = narrow(s, 0, b)
            s_minus = narrow(s, b, 2 * b)
            vt = constant(v)
            term1 = scale(tsum(square(add(s_plus, s_minus)), axis=-1), 1.0 / (8 * d))
            term2 = scale(sub(rowdot(vt, s_plus), rowdot(vt, s_minus)), 1.0 / (2 * eps**2))
            loss = tmean(add(term1, term2))
    return ObjectiveEstimate("fd-ssmvr", float(loss.value), loss, counters, b, epsilon_used=eps)


def mpf_naive(model, x, directions: DirectionSample) -> ObjectiveEstimate:
    """Naive one-sided FD reformulation (the minimum-probability-flow
    equivalent): (1/2 eps^2) E[(L(x+v) - L(x))^2 + 4 (L(x+v) - L(x))].
    Its gap to ssm closes only as o(1), unlike the symmetric fd forms."""
    x, v = _prep(model, x, directions)
    b, _ = x.shape
    eps = directions.epsilon
    with counters_scope() as counters:
        with Tape():
            count_forward(2 * b)
            cat = constant(np.concatenate([x, x + v], axis=0))
            e = model.energy(cat)
            e0 = narrow(e, 0, b)
            e_plus = narrow(e, b, 2 * b)
            delta = sub(e_plus, e0)
            loss = scale(tmean(add(square(delta), scale(delta, 4.0))), 1.0 / (2 * eps**2))
    return ObjectiveEstimate("mpf-naive", float(loss.value), loss, counters, b, epsilon_used=eps)


# ----------------------------------------------------------------------
# registry and gradient-direction comparison


@dataclass(frozen=True)
class ObjectiveInfo:
    name: str
    needs_directions: bool
    needs_sigma: bool
    model_type: str  # "energy" or "score"
    is_fd: bool


_REGISTRY: dict[str, ObjectiveInfo] = {
    "sm": ObjectiveInfo("sm", False, False, "energy", False),
    "dsm": ObjectiveInfo("dsm", False, True, "energy", False),
    "dsm-sliced": ObjectiveInfo("dsm-sliced", True, True, "energy", False),
    "ssm": ObjectiveInfo("ssm", True, False, "energy", False),
    "ssmvr": ObjectiveInfo("ssmvr", True, False, "score", False),
    "fd-ssm": ObjectiveInfo("fd-ssm", True, False, "energy", True),
    "fd-dsm": ObjectiveInfo("fd-dsm", True, True, "energy", True),
    "fd-ssmvr": ObjectiveInfo("fd-ssmvr", True, False, "score", True),
    "mpf-naive": ObjectiveInfo("mpf-naive", True, False, "energy", True),
}

OBJECTIVE_NAMES = tuple(_REGISTRY)


def objective_info(name: str) -> ObjectiveInfo:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise ValueError(
            f"unknown objective {name!r}; valid: {', '.join(OBJECTIVE_NAMES)}"
        ) from None


def evaluate_objective(name: str, model, x, *, directions: DirectionSample | None = None,
                       sigma: float | None = None, rng=None, noise=None) -> ObjectiveEstimate:
    """Uniform entry point used by the trainer, the bench harness and the CLI."""
    info = objective_info(name)
    if info.needs_directions and directions is None:
        raise ValueError(f"objective {name} needs projection directions")
    if info.needs_sigma and sigma is None:
        raise ValueError(f"objective {name} needs a noise scale sigma")
    if name == "sm":
        return sm_exact(model, x)
    if name == "dsm":
        return dsm(model, x, sigma, rng=rng, noise=noise)
    if name == "dsm-sliced":
        return dsm_sliced(model, x, sigma, directions, rng=rng, noise=noise)
    if name == "ssm":
        return ssm(model, x, directions)
    if name == "ssmvr":
        return ssmvr(model, x, directions)
    if name == "fd-ssm":
        return fd_ssm(model, x, directions)
    if name == "fd-dsm":
        return fd_dsm(model, x, sigma, directions, rng=rng, noise=noise)
    if name == "fd-ssmvr":
        return fd_ssmvr(model, x, directions)
    if name == "mpf-naive":
        return mpf_naive(model, x, directions)
    raise AssertionError(name)


def _flat_param_gradient(name, model, x, directions, sigma, noise, side: str) -> np.ndarray:
    est = evaluate_objective(name, model, x, directions=directions, sigma=sigma, noise=noise)
    grads = parameter_gradients(est, model.params)
    flat = np.concatenate([np.asarray(g).ravel() for g in grads])
    if not np.any(flat):
        raise ZeroGradientError(side)
    return flat


def grad_angle(objective_a: str, objective_b: str, model, x,
               directions: DirectionSample | None = None,
               sigma: float | None = None, noise=None) -> float:
    """Angle in degrees between the flattened parameter gradients of two
    objectives evaluated on identical batch, directions and noise."""
    ga = _flat_param_gradient(objective_a, model, x, directions, sigma, noise, "objective-a")
    gb = _flat_param_gradient(objective_b, model, x, directions, sigma, noise, "objective-b")
    if np.array_equal(ga, gb):
        return 0.0
    cosine = float(ga @ gb / (np.linalg.norm(ga) * np.linalg.norm(gb)))
    return float(np.degrees(np.arccos(np.clip(cosine, -1.0, 1.0))))
