"""Command-line entry point: ``metaopt <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import shutil
import sys
from pathlib import Path

import numpy as np

from . import config as cfg
from . import learned_opt as lo
from .corruptions import CorruptionSpec, corrupt_images, set_severity_table

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
BEST_SEED_NAME = "best_seed.txt"


class UsageError(Exception):
    """Bad arguments detected after parsing."""


# -- parser ----------------------------------------------------------------------


def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--task", choices=("toy", "gaussian", "corruption"))
    p.add_argument("--data-dir", dest="data_dir", help="CIFAR-10 binary directory (or METAOPT_DATA_DIR)")
    p.add_argument("--out-dir", dest="out_dir")
    seeds = p.add_mutually_exclusive_group()
    seeds.add_argument("--seed", type=int, help="run a single seed")
    seeds.add_argument("--seeds", help="a count N (seeds 0..N-1) or a comma-separated list")
    p.add_argument("--workers", type=int)
    p.add_argument("--mode", choices=("sync", "async"))
    p.add_argument("--severity-table", dest="severity_table")
    p.add_argument("--batch-size", dest="batch_size", type=int)


def _optimizer_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--optimizer",
        required=True,
        help="adam[:LR] | sgd:LR | learned:CHECKPOINT (a meta-train out dir picks its best seed)",
    )
    p.add_argument(
        "--data-mode",
        default="clean",
        help="clean | train_corruptions | a corruption label such as gaussian_sigma:0.05 or fog:2",
    )
    p.add_argument("--steps", dest="inner_steps", type=int)
    p.add_argument("--log-every", type=int, default=10)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metaopt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("meta-train", help="meta-train the learned optimizer with truncated ES")
    _shared(p)
    p.add_argument("--outer-iters", dest="outer_iters", type=int)
    p.add_argument("--pairs", dest="pairs_per_batch", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--outer-lr", dest="outer_lr", type=float)
    p.add_argument("--outer-beta1", dest="outer_beta1", type=float)
    p.add_argument("--outer-lr-schedule", dest="outer_lr_schedule", choices=("constant", "cosine"))
    p.add_argument("--staleness", type=int)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--max-unroll-steps", dest="max_unroll_steps")
    p.add_argument("--start-len", dest="start_len", type=int)
    p.add_argument("--end-len", dest="end_len", type=int)
    p.add_argument("--ramp-iters", dest="ramp_iters", type=int)
    p.add_argument("--jitter-frac", dest="jitter_frac", type=float)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("inner-train", help="train one inner model per seed and log its curve")
    _shared(p)
    _optimizer_flags(p)

    p = sub.add_parser("evaluate", help="inner-train, then sweep test loss over noise or severity")
    _shared(p)
    _optimizer_flags(p)
    p.add_argument("--sweep", choices=("noise", "severity"), default="noise")
    p.add_argument("--kind", default="fog", help="corruption kind for a severity sweep")
    p.add_argument("--reps", type=int, default=8)
    p.add_argument("--sigmas", help="comma-separated sigma list")

    p = sub.add_parser("grid-search", help="Adam learning-rate grid 10**(0.5 n)")
    _shared(p)
    p.add_argument("--eval-spec", default=None, help="target corruption label (default: the task's outer spec)")
    p.add_argument("--n-min", type=int, default=-12)
    p.add_argument("--n-max", type=int, default=2)
    p.add_argument("--steps", dest="inner_steps", type=int)
    p.add_argument("--data-mode", default="clean", help="clean, or a corruption applied to training batches")

    p = sub.add_parser("corrupt", help="corrupt a .npy image array (N, C, H, W) in [0, 1]")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--spec", required=True, help="e.g. identity, gaussian_sigma:0.1, zoom_blur:3")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--severity-table", dest="severity_table")

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    p.add_argument("--configs", type=int, default=20, help="randomized inner-model configurations")
    p.add_argument("--seed", type=int, default=0)
    return parser


# -- helpers ---------------------------------------------------------------------


_CONFIG_FLAGS = set(cfg.KEYS)


def _resolve(args: argparse.Namespace) -> cfg.ExperimentConfig:
    values = {k: v for k, v in vars(args).items() if k in _CONFIG_FLAGS and v is not None}
    if getattr(args, "seed", None) is not None:
        values["seeds"] = (args.seed,)
    elif getattr(args, "seeds", None) is not None:
        text = args.seeds.strip()
        values["seeds"] = tuple(range(int(text))) if text.isdigit() else cfg._parse_seeds(text)
    try:
        config = cfg.resolve(values, getattr(args, "config", None))
    except cfg.ConfigError as exc:
        raise UsageError(str(exc)) from None
    if config.severity_table:
        set_severity_table(config.severity_table)
    return config


def parse_data_mode(text: str):
    from .tasks import FixedSpec, TrainCorruptions

    text = text.strip()
    if text in ("clean", "identity", ""):
        return None
    if text == "train_corruptions":
        return TrainCorruptions()
    try:
        return FixedSpec(CorruptionSpec.parse(text))
    except ValueError as exc:
        raise UsageError(f"bad data mode {text!r}: {exc}") from None


def resolve_checkpoint(path: str | Path) -> Path:
    """A checkpoint file, or a meta-train directory whose best-seed marker names one."""
    path = Path(path)
    if path.is_dir():
        marker = path / BEST_SEED_NAME
        if not marker.is_file():
            raise UsageError(f"{path} has no {BEST_SEED_NAME}")
        fields = dict(line.split(" = ", 1) for line in marker.read_text().splitlines() if " = " in line)
        return path / fields["checkpoint"]
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return path


def parse_optimizer(text: str):
    from .inner_loop import SGD, Adam, Learned

    name, _, arg = text.partition(":")
    try:
        if name == "adam":
            return Adam(float(arg) if arg else 1e-3)
        if name == "sgd":
            if not arg:
                raise UsageError("sgd needs a learning rate, e.g. sgd:0.1")
            return SGD(float(arg))
    except ValueError:
        raise UsageError(f"bad learning rate in {text!r}") from None
    if name == "learned":
        ckpt = resolve_checkpoint(arg)
        return Learned(lo.load_checkpoint(ckpt), label=f"learned:{ckpt.name}")
    raise UsageError(f"unknown optimizer {text!r}")


def _out_dir(config: cfg.ExperimentConfig) -> Path:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.write(out)
    return out


# -- subcommands -----------------------------------------------------------------


def cmd_meta_train(args) -> int:
    from .outer import outer_train, select_best_seed, smoothed_final_loss

    if args.max_unroll_steps is not None:
        args.max_unroll_steps = cfg._optional_int(args.max_unroll_steps)
    config = _resolve(args)
    out = _out_dir(config)
    task = config.make_task()
    logs, finals = [], []
    for seed in config.seeds:
        seed_dir = out / f"seed_{seed}"

        def progress(row, seed=seed):
            if not args.quiet and (row["outer_iter"] % 50 == 0 or row["outer_iter"] == config.outer_iters - 1):
                print(
                    f"seed {seed} iter {row['outer_iter']:>6} trunc {row['trunc_len']:7.1f} "
                    f"loss {row['mean_outer_loss']:.4f} aborts {row['n_aborts']}",
                    flush=True,
                )

        run = outer_train(config.es_config(), config.schedule(), task, seed, seed_dir, progress)
        logs.append(run.log)
        finals.append(seed_dir / "theta_final.bin")
    best = select_best_seed(logs)
    best_path = finals[best]
    shutil.copyfile(best_path, out / "theta_best.bin")
    shutil.copyfile(best_path.with_name(best_path.name + ".txt"), out / "theta_best.bin.txt")
    scores = [smoothed_final_loss([r["mean_outer_loss"] for r in log]) for log in logs]
    (out / BEST_SEED_NAME).write_text(
        f"seed = {config.seeds[best]}\n"
        f"checkpoint = {best_path.relative_to(out)}\n"
        f"smoothed_final_loss = {scores[best]!r}\n"
    )
    print(f"best seed {config.seeds[best]} (smoothed final outer loss {scores[best]:.4f}) -> {out / 'theta_best.bin'}")
    return EXIT_OK


def cmd_inner_train(args) -> int:
    from .evaluation import emit_report, inner_train_many

    config = _resolve(args)
    optimizer = parse_optimizer(args.optimizer)
    mode = parse_data_mode(args.data_mode)
    out = _out_dir(config)
    task = config.make_task()
    runs = inner_train_many(optimizer, task, mode, config.inner_steps, config.seeds, args.log_every)
    emit_report(runs, [], out)
    for r in runs:
        status = "diverged" if r.diverged else f"clean test loss {r.clean_test_loss:.4f}"
        print(f"{r.optimizer} mode={r.mode} seed={r.seed}: {status}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .evaluation import DEFAULT_SIGMAS, emit_report, eval_noise_sweep, eval_severity_sweep, inner_train_many

    config = _resolve(args)
    optimizer = parse_optimizer(args.optimizer)
    mode = parse_data_mode(args.data_mode)
    out = _out_dir(config)
    task = config.make_task()
    runs = inner_train_many(optimizer, task, mode, config.inner_steps, config.seeds, args.log_every)
    sweeps = []
    for r in runs:
        if args.sweep == "noise":
            sigmas = [float(s) for s in args.sigmas.split(",")] if args.sigmas else DEFAULT_SIGMAS
            sweeps.append(eval_noise_sweep(r, task, sigmas, args.reps))
        else:
            sweeps.append(eval_severity_sweep(r, task, args.kind, reps=args.reps))
    emit_report(runs, sweeps, out)
    for s in sweeps:
        body = " ".join(f"{p.value:g}:{p.mean_loss:.4f}" for p in s.points)
        print(f"{s.optimizer} mode={s.mode} seed={s.seed} {s.axis_kind} {body}")
    return EXIT_OK


def cmd_grid_search(args) -> int:
    from .baselines import lr_grid_search, write_grid_csv

    config = _resolve(args)
    out = _out_dir(config)
    task = config.make_task()
    if args.eval_spec:
        try:
            eval_spec = CorruptionSpec.parse(args.eval_spec)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    else:
        eval_spec = task.target_spec
    result = lr_grid_search(
        task,
        eval_spec,
        (args.n_min, args.n_max),
        config.inner_steps,
        config.seeds,
        train_spec_sampler=parse_data_mode(args.data_mode),
    )
    write_grid_csv(result, out / "grid.csv")
    print(f"best n={result.best_n} alpha={result.best_alpha:.6g} mean final {eval_spec.label()} loss {result.best_loss:.4f}")
    return EXIT_OK


def cmd_corrupt(args) -> int:
    if args.severity_table:
        set_severity_table(args.severity_table)
    try:
        spec = CorruptionSpec.parse(args.spec)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    images = np.load(args.input)
    if images.dtype == np.uint8:
        images = images.astype(np.float64) / 255.0
    if images.ndim < 4:
        raise UsageError(f"expected an array of shape (N, C, H, W), got {images.shape}")
    if images.min() < 0 or images.max() > 1:
        raise UsageError("pixel values must lie in [0, 1]")
    out = corrupt_images(images.astype(np.float64), spec, np.random.default_rng(args.seed))
    output = Path(args.output)
    np.save(output, out)
    if output.suffix != ".npy":
        output = output.with_name(output.name + ".npy")
    output.with_name(output.name + ".spec.txt").write_text(f"spec = {spec.label()}\nseed = {args.seed}\n")
    print(f"wrote {output} ({spec.label()})")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_suite

    results = run_suite(args.seed, args.configs)
    worst = max(r.rel_error for r in results)
    kinks = sum(r.n_kinks for r in results)
    for r in results:
        print(f"{r.name:<24} rel_err {r.rel_error:.3e}  checked {r.n_checked}  kinks {r.n_kinks}")
    print(f"max relative error {worst:.3e} (tolerance {TOLERANCE:g}); {kinks} kink coordinates excluded")
    return EXIT_OK if worst <= TOLERANCE else EXIT_RUNTIME


COMMANDS = {
    "meta-train": cmd_meta_train,
    "inner-train": cmd_inner_train,
    "evaluate": cmd_evaluate,
    "grid-search": cmd_grid_search,
    "corrupt": cmd_corrupt,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"metaopt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"metaopt: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
