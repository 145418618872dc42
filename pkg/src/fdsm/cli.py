"""Single executable exposing every workflow as a subcommand.

Each run resolves its configuration, writes a manifest file first, then
writes CSV outputs whose filenames carry the manifest's run id. CSV
bodies are deterministic given the manifest and single-thread mode; wall
time, where reported, sits in its own column.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
import time

__all__ = ["main", "build_parser"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _set_thread_env() -> None:
    """FDSM_THREADS pins BLAS threading (0 or unset = automatic). Must
    run before numpy is imported anywhere in this process."""
    raw = os.environ.get("FDSM_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"FDSM_THREADS must be an integer, got {raw!r}")
    if n > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(n))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fdsm", description=__doc__)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--precision", choices=("f32", "f64"), default="f64")
    parser.add_argument("--out", default=".", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stencil", help="print stencil offsets and coefficients")
    p.add_argument("--order", type=int, required=True)
    p.add_argument("--alphas", default=None, help="comma-separated positive offsets")

    p = sub.add_parser("approx", help="FD vs exact directional derivative over an eps grid")
    p.add_argument("--function", choices=("mlp", "quadratic", "logsumexp"), required=True)
    p.add_argument("--order", type=int, required=True)
    p.add_argument("--eps-grid", required=True, help="comma-separated eps values")

    p = sub.add_parser("train", help="train a model with any objective")
    p.add_argument("--config", default=None, help="key = value file; flags override it")
    p.add_argument("--objective", default=None)
    p.add_argument("--dataset", default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--eps-decay", default=None, help="constant or linear:<eps_min>")
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--eval-every", type=int, default=None)
    p.add_argument("--eval-samples", type=int, default=None)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)

    p = sub.add_parser("eval", help="exact SM loss and Fisher divergence of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--n-eval", type=int, default=2000)

    p = sub.add_parser("sample", help="annealed Langevin samples from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("-n", type=int, default=1000)
    p.add_argument("--sigma-high", type=float, default=1.0)
    p.add_argument("--sigma-low", type=float, default=0.01)
    p.add_argument("--levels", type=int, default=10)
    p.add_argument("--steps-per-level", type=int, default=100)
    p.add_argument("--base-step", type=float, default=1e-3)

    p = sub.add_parser("bench", help="cost benchmarks")
    p.add_argument("mode", choices=("order-sweep", "objective"))
    p.add_argument("--t-max", type=int, default=4)
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--objectives", default="ssm,fd-ssm,dsm-sliced,fd-dsm")
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--hidden", type=int, default=256)
    p.add_argument("--depth", type=int, default=3)

    p = sub.add_parser("grad-angle", help="parameter-gradient angle between two objectives")
    p.add_argument("--objective-a", required=True)
    p.add_argument("--objective-b", required=True)
    p.add_argument("--eps-grid", required=True)
    p.add_argument("--dataset", default="gauss2")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--hidden", type=int, default=256)
    p.add_argument("--depth", type=int, default=3)

    return parser


def _fmt(x: float) -> str:
    """Integers print bare (the stencil contract), floats via repr."""
    f = float(x)
    return str(int(f)) if f == int(f) and abs(f) < 1e15 else repr(f)


def _build_id() -> str:
    from fdsm import __version__

    try:
        import subprocess

        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True, text=True, timeout=5,
        )
        git = rev.stdout.strip() if rev.returncode == 0 else "nogit"
    except Exception:
        git = "nogit"
    return f"fdsm-{__version__}+{git}"


def _write_manifest(out_dir: str, command: str, resolved: dict) -> str:
    """Write the run manifest before any work; returns the run id that
    every output filename carries."""
    body_items = sorted((k, str(v)) for k, v in resolved.items())
    digest = hashlib.sha256(
        (command + "|" + "|".join(f"{k}={v}" for k, v in body_items)).encode()
    ).hexdigest()[:10]
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"manifest-{digest}.txt")
    with open(path, "w") as fh:
        fh.write(f"run_id = {digest}\n")
        fh.write(f"subcommand = {command}\n")
        for k, v in body_items:
            fh.write(f"{k} = {v}\n")
        fh.write(f"build = {_build_id()}\n")
        fh.write(f"timestamp = {time.strftime('%Y-%m-%dT%H:%M:%S')}\n")
    return digest


def _out_path(out_dir: str, command: str, run_id: str, suffix: str = "csv") -> str:
    return os.path.join(out_dir, f"{command}-{run_id}.{suffix}")


def _cmd_stencil(args) -> int:
    from fdsm.stencil import solve_symmetric

    alphas = None
    if args.alphas:
        alphas = [float(a) for a in args.alphas.split(",")]
    stencil = solve_symmetric(args.order, alphas)
    resolved = {"order": args.order, "alphas": ",".join(map(_fmt, stencil.alphas)),
                "seed": args.seed, "precision": args.precision, "out": args.out}
    run_id = _write_manifest(args.out, "stencil", resolved)
    path = _out_path(args.out, "stencil", run_id)
    with open(path, "w") as fh:
        fh.write("T,K,alpha,beta\n")
        for a, b in zip(stencil.alphas, stencil.betas):
            fh.write(f"{stencil.order},{stencil.half_width},{_fmt(a)},{_fmt(b)}\n")
    print(path)
    return 0


def _approx_function(name: str, seed: int):
    import numpy as np

    from fdsm.autodiff import constant, exp, log, matmul, reshape, tsum
    from fdsm.models import QuadraticEnergyModel, reference_energy_model

    if name == "quadratic":
        model = QuadraticEnergyModel(dim=2)
        return model.energy_np, lambda t: tsum(model.energy(reshape(t, (1, 2)))), 2
    if name == "mlp":
        model = reference_energy_model(seed=seed)
        return model.energy_np, lambda t: tsum(model.energy(reshape(t, (1, 2)))), 2
    w = np.random.default_rng(seed).normal(size=(6, 2))

    def f_np(points):
        z = points @ w.T
        m = z.max(axis=-1, keepdims=True)
        return (m + np.log(np.sum(np.exp(z - m), axis=-1, keepdims=True))).reshape(-1)

    def f_tensor(t):
        return log(tsum(exp(matmul(reshape(t, (1, 2)), constant(w.T)))))

    return f_np, f_tensor, 2


def _cmd_approx(args) -> int:
    import numpy as np

    from fdsm.autodiff import exact_directional_derivative
    from fdsm.stencil import fd_directional, solve_symmetric

    eps_grid = [float(e) for e in args.eps_grid.split(",")]
    f_np, f_tensor, dim = _approx_function(args.function, args.seed)
    stencil = solve_symmetric(args.order)
    rng = np.random.default_rng(args.seed)
    x = rng.normal(size=dim)
    u = rng.normal(size=dim)
    u /= np.linalg.norm(u)

    resolved = {"function": args.function, "order": args.order,
                "eps_grid": args.eps_grid, "seed": args.seed,
                "precision": args.precision, "out": args.out}
    run_id = _write_manifest(args.out, "approx", resolved)
    path = _out_path(args.out, "approx", run_id)
    with open(path, "w") as fh:
        fh.write("function,order,eps,fd,exact,abs_err,rel_err\n")
        for eps in eps_grid:
            v = eps * u
            exact_raw = exact_directional_derivative(f_tensor, x, v, args.order) / eps**args.order
            fd_raw = fd_directional(f_np, x, v, stencil).raw_value
            abs_err = abs(fd_raw - exact_raw)
            rel_err = abs_err / max(abs(exact_raw), 1e-300)
            fh.write(
                f"{args.function},{args.order},{_fmt(eps)},{fd_raw!r},{exact_raw!r},"
                f"{_fmt(abs_err)},{_fmt(rel_err)}\n"
            )
    print(path)
    return 0


def _cmd_train(args) -> int:
    from dataclasses import fields

    from fdsm.training import TrainConfig, parse_config_file, train

    settings: dict = {}
    if args.config:
        raw = parse_config_file(args.config)
        valid = {f.name for f in fields(TrainConfig)}
        unknown = set(raw) - valid
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        for key, value in raw.items():
            kind = TrainConfig.__dataclass_fields__[key].type
            if kind == "int":
                settings[key] = int(value)
            elif kind == "float":
                settings[key] = float(value)
            else:
                settings[key] = value
    for key in ("objective", "dataset", "batch_size", "iterations", "optimizer", "lr",
                "epsilon", "eps_decay", "sigma", "eval_every", "eval_samples",
                "hidden", "depth", "workers"):
        value = getattr(args, key)
        if value is not None:
            settings[key] = value
    settings.setdefault("seed", args.seed)
    settings.setdefault("precision", args.precision)
    try:
        config = TrainConfig(**settings)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc

    resolved = {f: getattr(config, f) for f in config.__dataclass_fields__}
    resolved["out"] = args.out
    run_id = _write_manifest(args.out, "train", resolved)
    log_path = _out_path(args.out, "train", run_id)
    ckpt_path = _out_path(args.out, "model", run_id, suffix="fdsm")
    train(config, log_path=log_path, checkpoint_path=ckpt_path)
    print(log_path)
    print(ckpt_path)
    return 0


def _cmd_eval(args) -> int:
    import numpy as np

    from fdsm.densities import DATASET_NAMES, fisher_divergence, make_density
    from fdsm.models import load_model
    from fdsm.objectives import sm_exact

    if args.dataset not in DATASET_NAMES:
        raise UsageError(
            f"unknown dataset {args.dataset!r}; valid: {', '.join(DATASET_NAMES)}"
        )
    model = load_model(args.checkpoint)
    density = make_density(args.dataset)
    resolved = {"checkpoint": os.path.basename(args.checkpoint), "dataset": args.dataset,
                "n_eval": args.n_eval, "seed": args.seed,
                "precision": args.precision, "out": args.out}
    run_id = _write_manifest(args.out, "eval", resolved)

    held_out = density.sample(min(512, args.n_eval), np.random.default_rng([args.seed, 1]))
    sm = sm_exact(model, held_out)
    fisher = fisher_divergence(density, model.score_np, args.n_eval,
                               np.random.default_rng([args.seed, 2]))
    path = _out_path(args.out, "eval", run_id)
    with open(path, "w") as fh:
        fh.write("dataset,n_eval,sm_exact,fisher_div,fisher_se\n")
        fh.write(f"{args.dataset},{args.n_eval},{sm.value!r},{fisher.value!r},{fisher.std_error!r}\n")
    print(path)
    return 0


def _cmd_sample(args) -> int:
    from fdsm.models import load_model
    from fdsm.sampling import AnnealSchedule, langevin

    model = load_model(args.checkpoint)
    schedule = AnnealSchedule.geometric(args.sigma_high, args.sigma_low, args.levels,
                                        args.steps_per_level, args.base_step)
    resolved = {"checkpoint": os.path.basename(args.checkpoint), "n": args.n,
                "sigma_high": args.sigma_high, "sigma_low": args.sigma_low,
                "levels": args.levels, "steps_per_level": args.steps_per_level,
                "base_step": args.base_step, "seed": args.seed,
                "precision": args.precision, "out": args.out}
    run_id = _write_manifest(args.out, "sample", resolved)
    points = langevin(model, args.n, schedule, args.seed)
    path = _out_path(args.out, "sample", run_id)
    with open(path, "w") as fh:
        fh.write("x0,x1\n")
        for row in points:
            fh.write(f"{row[0]!r},{row[1]!r}\n")
    print(path)
    return 0


def _cmd_bench(args) -> int:
    from fdsm.bench import BENCH_CSV_HEADER, bench_objective, bench_order_sweep
    from fdsm.models import reference_energy_model, reference_score_model
    from fdsm.objectives import objective_info

    resolved = {"mode": args.mode, "t_max": args.t_max, "epsilon": args.epsilon,
                "objectives": args.objectives, "batch_size": args.batch_size,
                "repeats": args.repeats, "warmup": args.warmup, "hidden": args.hidden,
                "depth": args.depth, "seed": args.seed,
                "precision": args.precision, "out": args.out}
    run_id = _write_manifest(args.out, "bench", resolved)
    path = _out_path(args.out, "bench", run_id)

    records = []
    if args.mode == "order-sweep":
        model = reference_energy_model(seed=args.seed, hidden=args.hidden, depth=args.depth)
        records = bench_order_sweep(model, args.t_max, args.epsilon, seed=args.seed,
                                    repeats=args.repeats, warmup=args.warmup)
    else:
        names = [n.strip() for n in args.objectives.split(",") if n.strip()]
        for name in names:
            info = objective_info(name)
            builder = reference_score_model if info.model_type == "score" else reference_energy_model
            model = builder(seed=args.seed, hidden=args.hidden, depth=args.depth)
            records.append(bench_objective(model, name, batch=args.batch_size,
                                           epsilon=args.epsilon, seed=args.seed,
                                           repeats=args.repeats, warmup=args.warmup))
    with open(path, "w") as fh:
        fh.write(BENCH_CSV_HEADER + "\n")
        for record in records:
            fh.write(record.csv() + "\n")
    by_name = {r.method: r for r in records}
    for fd_name, base_name in (("fd-ssm", "ssm"), ("fd-dsm", "dsm-sliced")):
        if fd_name in by_name and base_name in by_name:
            ratio = by_name[fd_name].wall_ms / by_name[base_name].wall_ms
            print(f"[soft, hardware-dependent] {fd_name}/{base_name} wall ratio: {ratio:.3f}")
    print(path)
    return 0


def _cmd_grad_angle(args) -> int:
    import numpy as np

    from fdsm.densities import DATASET_NAMES, make_density
    from fdsm.models import reference_energy_model, reference_score_model
    from fdsm.objectives import OBJECTIVE_NAMES, grad_angle, objective_info, sample_direction

    for side, name in (("objective-a", args.objective_a), ("objective-b", args.objective_b)):
        if name not in OBJECTIVE_NAMES:
            raise UsageError(
                f"unknown {side} {name!r}; valid: {', '.join(OBJECTIVE_NAMES)}"
            )
    if args.dataset not in DATASET_NAMES:
        raise UsageError(
            f"unknown dataset {args.dataset!r}; valid: {', '.join(DATASET_NAMES)}"
        )
    info_a = objective_info(args.objective_a)
    info_b = objective_info(args.objective_b)
    if info_a.model_type != info_b.model_type:
        raise UsageError("objectives compare gradients on the same model; "
                         f"{args.objective_a} and {args.objective_b} use different model types")
    eps_grid = [float(e) for e in args.eps_grid.split(",")]

    resolved = {"objective_a": args.objective_a, "objective_b": args.objective_b,
                "eps_grid": args.eps_grid, "dataset": args.dataset,
                "batch_size": args.batch_size, "sigma": args.sigma,
                "hidden": args.hidden, "depth": args.depth, "seed": args.seed,
                "precision": args.precision, "out": args.out}
    run_id = _write_manifest(args.out, "grad-angle", resolved)

    builder = reference_score_model if info_a.model_type == "score" else reference_energy_model
    model = builder(seed=args.seed, hidden=args.hidden, depth=args.depth)
    density = make_density(args.dataset)
    x = density.sample(args.batch_size, np.random.default_rng([args.seed, 3]))
    needs_sigma = info_a.needs_sigma or info_b.needs_sigma
    noise = (np.random.default_rng([args.seed, 4]).standard_normal(x.shape)
             if needs_sigma else None)

    path = _out_path(args.out, "grad-angle", run_id)
    with open(path, "w") as fh:
        fh.write("eps,angle_deg\n")
        for eps in eps_grid:
            dirs = sample_direction(args.batch_size, x.shape[1], eps,
                                    np.random.default_rng([args.seed, 5]))
            angle = grad_angle(args.objective_a, args.objective_b, model, x,
                               directions=dirs, sigma=args.sigma if needs_sigma else None,
                               noise=noise)
            fh.write(f"{_fmt(eps)},{angle!r}\n")
    print(path)
    return 0


_COMMANDS = {
    "stencil": _cmd_stencil,
    "approx": _cmd_approx,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sample": _cmd_sample,
    "bench": _cmd_bench,
    "grad-angle": _cmd_grad_angle,
}


def main(argv=None) -> int:
    try:
        _set_thread_env()
        args = build_parser().parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        raise
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
