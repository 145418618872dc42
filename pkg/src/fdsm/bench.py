"""Cost measurement: exact nested derivatives vs FD decomposition, and
per-iteration objective timing.

Each record carries a median wall time over R repeats after W warmups
plus deterministic counters (function evaluations, derivative passes,
peak recorded tensor bytes) measured in a separate counted run. Wall
times are hardware-dependent and labeled soft; counters are hard.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import exact_directional_derivative, tsum
from .counters import counters_scope
from .objectives import evaluate_objective, objective_info, parameter_gradients, sample_direction
from .stencil import fd_directional, solve_symmetric

__all__ = ["BenchRecord", "BENCH_CSV_HEADER", "measure_ms", "bench_order_sweep", "bench_objective"]

BENCH_CSV_HEADER = "method,T,wall_ms,fwd_evals,deriv_passes,peak_bytes,rel_err"


@dataclass
class BenchRecord:
    method: str
    order: int
    wall_ms: float
    forward_evals: int
    derivative_passes: int
    peak_bytes: int
    rel_err: float | None = None

    def csv(self) -> str:
        err = "" if self.rel_err is None else repr(self.rel_err)
        return (
            f"{self.method},{self.order},{self.wall_ms:.3f},{self.forward_evals},"
            f"{self.derivative_passes},{self.peak_bytes},{err}"
        )


def measure_ms(fn: Callable[[], object], repeats: int = 20, warmup: int = 5) -> float:
    """Median wall time of fn() in milliseconds."""
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return float(np.median(times))


def _counted(fn: Callable[[], object]):
    """Run fn under a fresh counter frame twice and check the counters
    are identical (they are deterministic by construction)."""
    with counters_scope() as first:
        fn()
    with counters_scope() as second:
        fn()
    if (first.forward_evals, first.derivative_passes, first.max_tape_depth) != (
        second.forward_evals,
        second.derivative_passes,
        second.max_tape_depth,
    ):
        raise AssertionError("nondeterministic counters across identical runs")
    return first


def bench_order_sweep(model, t_max: int, epsilon: float = 0.1, seed: int = 0,
                      repeats: int = 20, warmup: int = 5) -> list[BenchRecord]:
    """Cost of the T-th directional derivative, T = 1..t_max, for the
    exact nested path and the FD stencil (sequential and batched)."""
    if t_max < 2:
        raise ValueError(f"bench_order_sweep: t_max must be >= 2, got {t_max}")
    rng = np.random.default_rng(seed)
    d = model.input_dim
    x = rng.normal(size=d)
    u = rng.normal(size=d)
    v = epsilon * u / np.linalg.norm(u)

    def f_tensor(t):
        return tsum(model.energy(t.reshape((1, d))))

    def f_np(points):
        return model.energy_np(points)

    records: list[BenchRecord] = []
    for order in range(1, t_max + 1):
        stencil = solve_symmetric(order)

        exact_value = exact_directional_derivative(f_tensor, x, v, order)
        c = _counted(lambda: exact_directional_derivative(f_tensor, x, v, order))
        wall = measure_ms(lambda: exact_directional_derivative(f_tensor, x, v, order),
                          repeats, warmup)
        records.append(BenchRecord("exact-nested", order, wall, c.forward_evals,
                                   c.derivative_passes, c.peak_live_bytes))

        for method, batched in (("fd", False), ("fd-parallel", True)):
            fd_value = float(fd_directional(f_np, x, v, stencil, batched=batched))
            c = _counted(lambda: fd_directional(f_np, x, v, stencil, batched=batched))
            wall = measure_ms(lambda: fd_directional(f_np, x, v, stencil, batched=batched),
                              repeats, warmup)
            rel_err = abs(fd_value - exact_value) / max(abs(exact_value), 1e-300)
            records.append(BenchRecord(method, order, wall, c.forward_evals,
                                       c.derivative_passes, c.peak_live_bytes, rel_err))
    return records


def bench_objective(model, objective: str, batch: int = 128, epsilon: float = 0.1,
                    sigma: float = 0.1, seed: int = 0, repeats: int = 20,
                    warmup: int = 5) -> BenchRecord:
    """Median wall time of one full loss evaluation plus parameter
    gradient for the given objective on a fixed batch."""
    info = objective_info(objective)
    rng = np.random.default_rng(seed)
    d = model.input_dim
    x = rng.normal(size=(batch, d))
    directions = sample_direction(batch, d, epsilon, rng) if info.needs_directions else None
    noise = rng.standard_normal((batch, d)) if info.needs_sigma else None

    def step():
        est = evaluate_objective(objective, model, x, directions=directions,
                                 sigma=sigma if info.needs_sigma else None, noise=noise)
        parameter_gradients(est, model.params)
        return est

    c = _counted(step)
    wall = measure_ms(step, repeats, warmup)
    return BenchRecord(objective, 0, wall, c.forward_evals, c.derivative_passes,
                       c.peak_live_bytes)
