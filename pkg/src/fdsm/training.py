"""Mini-batch stochastic optimization of any objective over a model.

The loop is deterministic under a fixed seed in single-worker mode: data
batches, projection directions and noise all come from one seeded
generator, evaluation batches from a derived stream. Each eval row
records the objective value, the exact score-matching loss on a held-out
batch, the Fisher divergence to the analytic score, cost counters and
wall time (wall time is the one column allowed to vary between runs).
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .counters import EvalCounters
from .densities import fisher_divergence, make_density
from .models import MlpEnergyModel, MlpScoreModel, save_model
from .objectives import (
    ObjectiveEstimate,
    evaluate_objective,
    objective_info,
    parameter_gradients,
    sample_direction,
)

__all__ = [
    "TrainConfig",
    "TrainResult",
    "LogRow",
    "TRAIN_LOG_HEADER",
    "NonFiniteLossError",
    "NonFiniteGradientError",
    "Sgd",
    "Adam",
    "make_optimizer",
    "build_model",
    "train_step",
    "train",
    "parse_config_file",
]


class NonFiniteLossError(RuntimeError):
    def __init__(self, iteration: int, epsilon: float, value: float):
        self.iteration = iteration
        self.epsilon = epsilon
        self.value = value
        super().__init__(
            f"non-finite loss {value!r} at iteration {iteration} (epsilon={epsilon})"
        )


class NonFiniteGradientError(RuntimeError):
    def __init__(self, param_name: str):
        self.param_name = param_name
        super().__init__(f"non-finite gradient in parameter block {param_name!r}")


@dataclass
class TrainConfig:
    objective: str = "fd-ssm"
    dataset: str = "gauss2"
    batch_size: int = 128
    iterations: int = 1000
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    epsilon: float = 0.1
    eps_decay: str = "constant"  # or "linear:<eps_min>"
    sigma: float = 0.1
    eval_every: int = 200
    eval_samples: int = 1000
    hidden: int = 256
    depth: int = 3
    precision: str = "f64"
    workers: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}; valid: adam, sgd")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"unknown precision {self.precision!r}; valid: f32, f64")
        objective_info(self.objective)  # raises on unknown token
        self.epsilon_at(0)  # validates the decay spec

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def epsilon_at(self, iteration: int) -> float:
        if self.eps_decay == "constant":
            return self.epsilon
        if self.eps_decay.startswith("linear:"):
            eps_min = float(self.eps_decay.split(":", 1)[1])
            if self.iterations <= 1:
                return self.epsilon
            frac = min(iteration / (self.iterations - 1), 1.0) if self.iterations > 1 else 0.0
            return self.epsilon + (eps_min - self.epsilon) * frac
        raise ValueError(f"unknown eps_decay {self.eps_decay!r}; use 'constant' or 'linear:<min>'")


def parse_config_file(path) -> dict[str, str]:
    """Flat `key = value` lines; '#' starts a comment; keys may use dashes."""
    out: dict[str, str] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, value = line.split("=", 1)
            out[key.strip().replace("-", "_")] = value.strip()
    return out


class Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params, grads) -> None:
        for p, g in zip(params, grads):
            p.value[...] = p.value - self.lr * np.asarray(g, dtype=p.value.dtype)


class Adam:
    """Adam with bias-corrected moment estimates."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, params, grads) -> None:
        if self.m is None:
            self.m = [np.zeros_like(p.value, dtype=np.float64) for p in params]
            self.v = [np.zeros_like(p.value, dtype=np.float64) for p in params]
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, (p, g) in enumerate(zip(params, grads)):
            g = np.asarray(g, dtype=np.float64)
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            m_hat = self.m[i] / (1 - b1**self.t)
            v_hat = self.v[i] / (1 - b2**self.t)
            update = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.value[...] = p.value - update.astype(p.value.dtype)


def make_optimizer(config: TrainConfig):
    if config.optimizer == "sgd":
        return Sgd(config.lr)
    return Adam(config.lr, config.beta1, config.beta2, config.adam_eps)


def build_model(config: TrainConfig, dim: int = 2):
    info = objective_info(config.objective)
    widths = (dim, *([config.hidden] * config.depth))
    if info.model_type == "score":
        return MlpScoreModel((*widths, dim), seed=config.seed, dtype=config.dtype)
    return MlpEnergyModel((*widths, 1), seed=config.seed, dtype=config.dtype)


def _shard_slices(batch: int, workers: int):
    sizes = [len(part) for part in np.array_split(np.arange(batch), workers) if len(part)]
    bounds, start = [], 0
    for n in sizes:
        bounds.append((start, start + n))
        start += n
    return bounds


def train_step(model, objective: str, x, optimizer, *, directions=None, sigma=None,
               noise=None, workers: int = 1) -> ObjectiveEstimate:
    """One objective evaluation + parameter update.

    With workers > 1 the batch is sharded; each shard's gradient is
    computed on a read-only parameter snapshot in its own thread, then
    reduced by a weighted sum in shard order (deterministic regardless of
    scheduling)."""
    params = model.params
    b = len(x)
    if workers <= 1 or b < 2 * workers:
        est = evaluate_objective(objective, model, x, directions=directions,
                                 sigma=sigma, noise=noise)
        grads = parameter_gradients(est, params)
    else:
        bounds = _shard_slices(b, workers)

        def shard(lo_hi):
            lo, hi = lo_hi
            d = None
            if directions is not None:
                d = replace(directions, v=directions.v[lo:hi])
            z = None if noise is None else noise[lo:hi]
            e = evaluate_objective(objective, model, x[lo:hi], directions=d,
                                   sigma=sigma, noise=z)
            return e, parameter_gradients(e, params)

        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(shard, bounds))
        total = EvalCounters()
        value = 0.0
        grads = [np.zeros_like(p.value, dtype=np.float64) for p in params]
        for (lo, hi), (e, shard_grads) in zip(bounds, results):
            w = (hi - lo) / b
            value += w * e.value
            for acc, g in zip(grads, shard_grads):
                acc += w * np.asarray(g, dtype=np.float64)
            total.forward_evals += e.counters.forward_evals
            total.first_order_passes += e.counters.first_order_passes
            total.nested_passes += e.counters.nested_passes
            total.max_tape_depth = max(total.max_tape_depth, e.counters.max_tape_depth)
        est = ObjectiveEstimate(objective, value, None, total, b,
                                epsilon_used=None if directions is None else directions.epsilon,
                                sigma_used=sigma)

    for name, g in zip(model.param_names, grads):
        if not np.all(np.isfinite(np.asarray(g))):
            raise NonFiniteGradientError(name)
    optimizer.step(params, grads)
    return est


TRAIN_LOG_HEADER = (
    "iter,loss,sm_exact,fisher_div,fisher_se,epsilon,fwd_evals,"
    "first_order_passes,nested_passes,max_tape_depth,wall_ms"
)


@dataclass
class LogRow:
    iteration: int
    loss: float
    sm_exact: float
    fisher_div: float
    fisher_se: float
    epsilon: float
    fwd_evals: int
    first_order_passes: int
    nested_passes: int
    max_tape_depth: int
    wall_ms: float

    def csv(self) -> str:
        return (
            f"{self.iteration},{self.loss!r},{self.sm_exact!r},{self.fisher_div!r},"
            f"{self.fisher_se!r},{self.epsilon!r},{self.fwd_evals},"
            f"{self.first_order_passes},{self.nested_passes},{self.max_tape_depth},"
            f"{self.wall_ms:.3f}"
        )


@dataclass
class TrainResult:
    config: TrainConfig
    model: object
    rows: list[LogRow] = field(default_factory=list)


def _eval_row(model, density, config, iteration, loss_value, est, wall_ms) -> LogRow:
    from .objectives import sm_exact

    eval_rng = np.random.default_rng([config.seed, 0xE7A1])
    held_out = density.sample(min(256, max(config.eval_samples, 1)), eval_rng)
    sm_est = sm_exact(model, held_out)
    fisher = fisher_divergence(density, model.score_np, config.eval_samples,
                               np.random.default_rng([config.seed, 0xF15E]))
    counters = est.counters if est is not None else EvalCounters()
    return LogRow(
        iteration=iteration,
        loss=loss_value,
        sm_exact=sm_est.value,
        fisher_div=fisher.value,
        fisher_se=fisher.std_error,
        epsilon=config.epsilon_at(iteration),
        fwd_evals=counters.forward_evals,
        first_order_passes=counters.first_order_passes,
        nested_passes=counters.nested_passes,
        max_tape_depth=counters.max_tape_depth,
        wall_ms=wall_ms,
    )


def train(config: TrainConfig, log_path=None, checkpoint_path=None) -> TrainResult:
    """Run the full training loop described by `config`.

    Appends one log row at iteration 0 and then every eval_every
    iterations (plus a final row). A non-finite loss aborts with a
    diagnostic row recording the iteration and the epsilon in use.
    """
    info = objective_info(config.objective)
    density = make_density(config.dataset)
    model = build_model(config)
    optimizer = make_optimizer(config)
    rng = np.random.default_rng(config.seed)

    rows: list[LogRow] = []
    log_fh = open(log_path, "w") if log_path is not None else None
    if log_fh:
        log_fh.write(TRAIN_LOG_HEADER + "\n")

    def emit(row: LogRow):
        rows.append(row)
        if log_fh:
            log_fh.write(row.csv() + "\n")
            log_fh.flush()

    try:
        emit(_eval_row(model, density, config, 0, float("nan"), None, 0.0))
        wall_acc, wall_n = 0.0, 0
        for it in range(1, config.iterations + 1):
            eps = config.epsilon_at(it - 1)
            x = density.sample(config.batch_size, rng)
            directions = None
            if info.needs_directions:
                directions = sample_direction(config.batch_size, x.shape[1], eps, rng)
            noise = rng.standard_normal(x.shape) if info.needs_sigma else None

            t0 = time.perf_counter()
            est = train_step(model, config.objective, x, optimizer,
                             directions=directions, sigma=config.sigma if info.needs_sigma else None,
                             noise=noise, workers=config.workers)
            wall_acc += (time.perf_counter() - t0) * 1e3
            wall_n += 1

            if not np.isfinite(est.value):
                emit(_eval_row(model, density, config, it, est.value, est,
                               wall_acc / max(wall_n, 1)))
                raise NonFiniteLossError(it, eps, est.value)

            if it % config.eval_every == 0 or it == config.iterations:
                emit(_eval_row(model, density, config, it, est.value, est,
                               wall_acc / max(wall_n, 1)))
                wall_acc, wall_n = 0.0, 0
    finally:
        if log_fh:
            log_fh.close()

    if checkpoint_path is not None:
        save_model(checkpoint_path, model)
    return TrainResult(config=config, model=model, rows=rows)
