"""Vectorized inner training shared by the grid search, the evaluation harness and ES.

A *population* is a stack of independent inner models sharing one leading
axis. Each member is bound to a random *stream*; members bound to the same
stream see the same initialization, minibatch order and corruption draws.
That is how antithetic pairs share randomness and how grid-search runs with
the same seed share data order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import learned_opt as lo
from . import model
from .baselines import ADAM_BETA1, ADAM_BETA2, ADAM_EPS, adam_step, init_adam, sgd_step
from .corruptions import CorruptionSpec, corrupt_images
from .dataset import Split, sample_indices
from .model import InnerParams

EVAL_CHUNK = 1000


# -- update rules with a common interface ----------------------------------------


@dataclass
class SGD:
    lr: float | np.ndarray

    def init(self, params: InnerParams):
        return None

    def update(self, state, params: InnerParams, grads: InnerParams):
        return sgd_step(params, grads, self.lr), state

    def describe(self) -> str:
        return f"sgd({_fmt_lr(self.lr)})"


@dataclass
class Adam:
    lr: float | np.ndarray = 1e-3
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    def init(self, params: InnerParams):
        return init_adam(params, self.lr, self.beta1, self.beta2, self.eps)

    def update(self, state, params: InnerParams, grads: InnerParams):
        return adam_step(state, params, grads)

    def describe(self) -> str:
        return f"adam({_fmt_lr(self.lr)})"


@dataclass
class Learned:
    theta: lo.LearnedOptParams
    label: str = "learned"

    def init(self, params: InnerParams):
        return lo.init_state(params)

    def update(self, state, params: InnerParams, grads: InnerParams):
        new, state, _ = lo.step(self.theta, state, params, grads)
        return new, state

    def describe(self) -> str:
        return self.label


def _fmt_lr(lr) -> str:
    lr = np.asarray(lr)
    return f"{float(lr):.6g}" if lr.ndim == 0 else "grid"


# -- streams ---------------------------------------------------------------------


def bind_streams(seeds: Sequence[int]) -> tuple[list[np.random.Generator], np.ndarray]:
    """One generator per distinct seed and the member -> stream index map."""
    order = list(dict.fromkeys(int(s) for s in seeds))
    streams = [np.random.default_rng(s) for s in order]
    return streams, np.array([order.index(int(s)) for s in seeds], dtype=np.intp)


def gather(tree: dict, index: np.ndarray) -> dict:
    return {k: np.take(v, index, axis=0) for k, v in tree.items()}


def init_members(streams, member_stream: np.ndarray, arch) -> InnerParams:
    per_stream = [model.init_inner(rng, arch) for rng in streams]
    stacked = {k: np.stack([p[k] for p in per_stream]) for k in per_stream[0]}
    return gather(stacked, member_stream)


def _is_identity_map(member_stream: np.ndarray, n_streams: int) -> bool:
    return len(member_stream) == n_streams and np.array_equal(member_stream, np.arange(n_streams))


def draw_batches(
    split: Split,
    batch_size: int,
    streams,
    member_stream: np.ndarray,
    spec_sampler: Callable | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Sample one minibatch per stream (optionally corrupted) and fan it out to members.

    Draw order per stream: indices, then (if a sampler is given) the spec
    and the corruption noise.
    """
    images, labels = [], []
    for rng in streams:
        batch = split.take(sample_indices(len(split), batch_size, rng))
        x = batch.images
        if spec_sampler is not None:
            x = corrupt_images(x, spec_sampler(rng), rng)
        images.append(x)
        labels.append(batch.labels)
    images, labels = np.stack(images), np.stack(labels)
    if _is_identity_map(member_stream, len(streams)):
        return images, labels
    return images[member_stream], labels[member_stream]


def all_finite(tree: dict, axis_count: int) -> np.ndarray:
    """Per-member finiteness over every tensor of a population tree."""
    ok = np.ones(axis_count, dtype=bool)
    for v in tree.values():
        ok &= np.isfinite(v.reshape(axis_count, -1)).all(axis=1)
    return ok


def zero_members(tree, mask: np.ndarray):
    """Zero the masked members of every array in a tree or optimizer state, in place."""
    if tree is None or not mask.any():
        return tree
    if isinstance(tree, dict):
        for v in tree.values():
            v[mask] = 0.0
        return tree
    for name in ("m", "v", "momenta"):
        if hasattr(tree, name):
            zero_members(getattr(tree, name), mask)
    return tree


# -- population training ---------------------------------------------------------


@dataclass
class PopulationRun:
    params: InnerParams
    diverged: np.ndarray  # (P,) bool
    curve_steps: np.ndarray  # (n_log,)
    curve: np.ndarray  # (n_log, P) training minibatch loss; ln K once diverged
    state: object = field(default=None, repr=False)


def train_population(
    task,
    optimizer,
    member_seeds: Sequence[int],
    steps: int,
    train_spec_sampler: Callable | None = None,
    log_every: int = 10,
) -> PopulationRun:
    """Inner-train one model per entry of ``member_seeds`` in a single population.

    Minibatches are clean unless ``train_spec_sampler`` is given, in which case
    every minibatch gets a freshly sampled corruption. A member whose loss or
    gradient turns non-finite is marked diverged; its parameters are zeroed
    so the remaining members keep running.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    streams, member_stream = bind_streams(member_seeds)
    P = len(member_stream)
    ln_k = float(np.log(task.arch.num_classes))
    params = init_members(streams, member_stream, task.arch)
    state = optimizer.init(params)
    diverged = np.zeros(P, dtype=bool)
    log_steps, curve = [], []
    for step in range(1, steps + 1):
        images, labels = draw_batches(task.data.train, task.batch_size, streams, member_stream, train_spec_sampler)
        loss, grads = model.loss_and_grad(params, images, labels, task.arch)
        bad = ~np.isfinite(loss) | ~all_finite(grads, P)
        newly = bad & ~diverged
        diverged |= bad
        if newly.any():
            zero_members(grads, diverged)
        with np.errstate(all="ignore"):
            params, state = optimizer.update(state, params, grads)
        bad = ~all_finite(params, P)
        diverged |= bad
        zero_members(params, diverged)
        zero_members(state, diverged)
        if step % log_every == 0:
            log_steps.append(step)
            curve.append(np.where(diverged, ln_k, loss))
    curve_arr = np.array(curve) if curve else np.zeros((0, P))
    return PopulationRun(params, diverged, np.array(log_steps, dtype=np.int64), curve_arr, state)


def eval_rng(seed: int, purpose: int = 1) -> np.random.Generator:
    """Evaluation noise stream derived from a run seed, independent of training draws."""
    return np.random.default_rng([int(seed), purpose])


def evaluate_members(
    params: InnerParams,
    arch,
    split: Split,
    spec: CorruptionSpec,
    rng: np.random.Generator,
    chunk: int = EVAL_CHUNK,
) -> np.ndarray:
    """Mean loss of every population member over the full split under one corruption draw."""
    total = None
    n = len(split)
    for start in range(0, n, chunk):
        batch = split.take(slice(start, start + chunk))
        x = batch.images
        if spec.kind != "identity":
            x = corrupt_images(x, spec, rng)
        part = model.loss(params, x, batch.labels, arch) * len(batch)
        total = part if total is None else total + part
    return total / n


def final_losses(task, run: PopulationRun, spec: CorruptionSpec, member_seeds: Sequence[int], split: str = "valid") -> np.ndarray:
    """Per-member loss on a full split under ``spec``; ln K for diverged members.

    Members sharing a seed share the corruption draw.
    """
    data = getattr(task.data, split)
    member_seeds = np.asarray(member_seeds)
    out = np.empty(len(member_seeds))
    for seed in dict.fromkeys(member_seeds.tolist()):
        idx = np.flatnonzero(member_seeds == seed)
        out[idx] = evaluate_members(model.take(run.params, idx), task.arch, data, spec, eval_rng(seed))
    out[run.diverged | ~np.isfinite(out)] = np.log(task.arch.num_classes)
    return out
