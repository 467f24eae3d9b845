"""Inner-train with any optimizer, then sweep test loss over noise or severity."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corruptions import DETERMINISTIC_KINDS, IDENTITY, SEVERITY_KINDS, CorruptionSpec, CorruptionSpecError
from .inner_loop import eval_rng, evaluate_members, train_population
from .model import InnerParams

DEFAULT_SIGMAS = tuple(np.round(np.arange(0, 0.2001, 0.025), 3))
DEFAULT_SEVERITIES = (0, 1, 2, 3, 4, 5)
DEFAULT_REPS = 8
CURVE_COLUMNS = ("optimizer", "mode", "step", "loss", "seed", "diverged")
SWEEP_COLUMNS = ("optimizer", "mode", "axis_kind", "axis_value", "mean_loss", "stderr", "seed", "diverged")


@dataclass
class EvalRun:
    optimizer: str
    mode: str
    steps: int
    seed: int
    curve_steps: np.ndarray
    curve: np.ndarray
    params: InnerParams = field(repr=False)
    diverged: bool
    clean_test_loss: float


@dataclass
class SweepPoint:
    value: float
    mean_loss: float
    stderr: float
    losses: np.ndarray = field(repr=False)


@dataclass
class Sweep:
    optimizer: str
    mode: str
    seed: int
    axis_kind: str
    points: list[SweepPoint]
    diverged: bool = False

    def means(self) -> np.ndarray:
        return np.array([p.mean_loss for p in self.points])


def describe_mode(data_mode) -> str:
    if data_mode is None:
        return "clean"
    return data_mode.describe() if hasattr(data_mode, "describe") else str(data_mode)


def inner_train_many(optimizer, task, data_mode, steps: int, seeds: Sequence[int], log_every: int = 10) -> list[EvalRun]:
    """One :class:`EvalRun` per seed, trained together as a population.

    ``data_mode`` is None for clean minibatches or a spec sampler (called
    with the run's rng) that corrupts every training minibatch.
    """
    seeds = [int(s) for s in seeds]
    run = train_population(task, optimizer, seeds, steps, train_spec_sampler=data_mode, log_every=log_every)
    ln_k = float(np.log(task.arch.num_classes))
    out = []
    for i, seed in enumerate(seeds):
        params = {k: v[i].copy() for k, v in run.params.items()}
        diverged = bool(run.diverged[i])
        clean = ln_k if diverged else test_loss(params, task, IDENTITY, seed)
        out.append(
            EvalRun(
                optimizer.describe(),
                describe_mode(data_mode),
                steps,
                seed,
                run.curve_steps.copy(),
                run.curve[:, i].copy(),
                params,
                diverged,
                clean,
            )
        )
    return out


def inner_train(optimizer, task, data_mode, steps: int, seed: int, log_every: int = 10) -> EvalRun:
    """Train one inner model exactly as a truncation would, minus evals and aborts."""
    return inner_train_many(optimizer, task, data_mode, steps, [seed], log_every)[0]


def test_loss(params: InnerParams, task, spec: CorruptionSpec, seed: int, rep: int = 0, split: str = "test") -> float:
    """Mean loss over a full split under one draw of ``spec``."""
    return float(evaluate_members(params, task.arch, getattr(task.data, split), spec, eval_rng(seed, 100 + rep)))


def _point(params, task, spec: CorruptionSpec, seed: int, reps: int, deterministic: bool, split: str) -> tuple[float, float, np.ndarray]:
    if deterministic:
        value = test_loss(params, task, spec, seed, 0, split)
        return value, 0.0, np.full(reps, value)
    losses = np.array([test_loss(params, task, spec, seed, r, split) for r in range(reps)])
    stderr = float(losses.std(ddof=1) / np.sqrt(reps)) if reps > 1 else 0.0
    return float(losses.mean()), stderr, losses


def eval_noise_sweep(
    run: EvalRun,
    task,
    sigmas: Sequence[float] = DEFAULT_SIGMAS,
    reps: int = DEFAULT_REPS,
    split: str = "test",
) -> Sweep:
    """Mean test loss under ``gaussian_sigma`` for each sigma, averaged over ``reps`` draws."""
    if any(s < 0 for s in sigmas):
        raise CorruptionSpecError("sigma must be >= 0")
    return _sweep(run, task, "gaussian_sigma", [(float(s), CorruptionSpec.gaussian(s)) for s in sigmas], reps, split)


def eval_severity_sweep(
    run: EvalRun,
    task,
    kind: str,
    severities: Sequence[int] = DEFAULT_SEVERITIES,
    reps: int = DEFAULT_REPS,
    split: str = "test",
) -> Sweep:
    """Mean test loss per severity of one corruption kind; severity 0 is clean."""
    if kind not in SEVERITY_KINDS:
        raise CorruptionSpecError(f"unknown corruption kind {kind!r}")
    specs = [(float(s), IDENTITY if s == 0 else CorruptionSpec(kind, severity=int(s))) for s in severities]
    return _sweep(run, task, kind, specs, reps, split)


def _sweep(run: EvalRun, task, axis_kind: str, specs, reps: int, split: str) -> Sweep:
    if reps < 1:
        raise ValueError("reps must be >= 1")
    ln_k = float(np.log(task.arch.num_classes))
    points = []
    for value, spec in specs:
        if run.diverged:
            points.append(SweepPoint(value, ln_k, 0.0, np.full(reps, ln_k)))
            continue
        deterministic = spec.kind in DETERMINISTIC_KINDS or (spec.kind == "gaussian_sigma" and spec.sigma == 0)
        mean, stderr, losses = _point(run.params, task, spec, run.seed, reps, deterministic, split)
        points.append(SweepPoint(value, mean, stderr, losses))
    return Sweep(run.optimizer, run.mode, run.seed, axis_kind, points, run.diverged)


def emit_report(runs: Sequence[EvalRun], sweeps: Sequence[Sweep], out_dir: str | Path) -> tuple[Path, Path]:
    """Write ``curves.csv`` and ``sweeps.csv``; floats are written with full precision."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    curves_path, sweeps_path = out / "curves.csv", out / "sweeps.csv"
    with open(curves_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_COLUMNS)
        for r in runs:
            for step, loss in zip(r.curve_steps, r.curve):
                w.writerow([r.optimizer, r.mode, int(step), repr(float(loss)), r.seed, int(r.diverged)])
    with open(sweeps_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for s in sweeps:
            for p in s.points:
                w.writerow(
                    [s.optimizer, s.mode, s.axis_kind, repr(p.value), repr(p.mean_loss), repr(p.stderr), s.seed, int(s.diverged)]
                )
    return curves_path, sweeps_path


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
