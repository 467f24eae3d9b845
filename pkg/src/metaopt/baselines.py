"""Hand-designed update rules and the learning-rate grid search."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .corruptions import CorruptionSpec

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
GRID_N_RANGE = (-12, 2)


class Divergence(FloatingPointError):
    """A gradient or loss became non-finite."""


class NoViableLearningRate(RuntimeError):
    """Every run in a grid search diverged."""


def per_member(value, like: np.ndarray):
    """Broadcast a scalar or per-population-member array against ``like``."""
    value = np.asarray(value, dtype=np.float64)
    if value.ndim == 0:
        return value
    return value.reshape(value.shape + (1,) * (like.ndim - value.ndim))


def _as_tree(x):
    return (x, False) if isinstance(x, dict) else ({"_": np.asarray(x, dtype=np.float64)}, True)


def sgd_step(w, g, lr):
    """``w - lr * g`` for an array or a dict of arrays."""
    wt, bare = _as_tree(w)
    gt, _ = _as_tree(g)
    out = {k: v - per_member(lr, v) * gt[k] for k, v in wt.items()}
    return out["_"] if bare else out


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    lr: float | np.ndarray = 1e-3
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS


def init_adam(params, lr=1e-3, beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2, eps: float = ADAM_EPS) -> AdamState:
    tree, _ = _as_tree(params)
    zeros = {k: np.zeros_like(v) for k, v in tree.items()}
    return AdamState({k: z.copy() for k, z in zeros.items()}, zeros, 0, lr, beta1, beta2, eps)


def adam_step(state: AdamState, w, g, check_finite: bool = False):
    """One bias-corrected Adam update. Returns ``(w_new, state_new)``.

    With ``check_finite`` a non-finite gradient raises :class:`Divergence`.
    """
    wt, bare = _as_tree(w)
    gt, _ = _as_tree(g)
    if check_finite and not all(np.all(np.isfinite(x)) for x in gt.values()):
        raise Divergence("non-finite gradient in adam_step")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    m, v, out = {}, {}, {}
    for k, wk in wt.items():
        gk = gt[k]
        m[k] = b1 * state.m[k] + (1.0 - b1) * gk
        v[k] = b2 * state.v[k] + (1.0 - b2) * gk * gk
        step = (m[k] / c1) / (np.sqrt(v[k] / c2) + state.eps)
        out[k] = wk - per_member(state.lr, wk) * step
    new_state = replace(state, m=m, v=v, t=t)
    return (out["_"] if bare else out), new_state


def grid_alpha(n: int | np.ndarray) -> np.ndarray:
    """Learning rate ``10 ** (0.5 * n)``."""
    return 10.0 ** (0.5 * np.asarray(n, dtype=np.float64))


@dataclass
class GridSearchResult:
    best_n: int
    best_alpha: float
    best_loss: float
    rows: list[dict]  # n, alpha, seed, final_clean_loss, final_eval_loss

    def mean_losses(self) -> dict[int, float]:
        out: dict[int, list[float]] = {}
        for r in self.rows:
            out.setdefault(r["n"], []).append(r["final_eval_loss"])
        return {n: float(np.mean(v)) for n, v in out.items()}


def select_grid_point(ns: Sequence[int], scores: Sequence[float]) -> int:
    """Index of the lowest finite score; ties go to the smaller learning rate."""
    best = None
    for i in np.argsort(ns, kind="stable"):
        s = scores[i]
        if not np.isfinite(s):
            continue
        if best is None or s < scores[best]:
            best = i
    if best is None:
        raise NoViableLearningRate("every learning rate in the grid diverged")
    return int(best)


def lr_grid_search(
    task,
    eval_spec: CorruptionSpec,
    n_range: tuple[int, int] = GRID_N_RANGE,
    steps: int = 1000,
    seeds: Sequence[int] = (0, 1, 2),
    train_spec_sampler=None,
) -> GridSearchResult:
    """Train Adam at every ``10**(0.5 n)`` for each seed and pick the best mean score.

    The score of a learning rate is the mean over seeds of the final
    validation loss under ``eval_spec``. A run that diverges scores ``inf``.
    ``train_spec_sampler`` corrupts every training minibatch (the
    "inner-trained on noised data" baseline).
    """
    from .inner_loop import Adam, final_losses, train_population

    ns = np.arange(n_range[0], n_range[1] + 1)
    seeds = list(seeds)
    member_n = np.repeat(ns, len(seeds))
    member_seed = np.tile(seeds, len(ns))
    opt = Adam(lr=grid_alpha(member_n))
    result = train_population(task, opt, member_seed, steps, train_spec_sampler=train_spec_sampler)
    clean = final_losses(task, result, CorruptionSpec(), member_seed)
    evals = final_losses(task, result, eval_spec, member_seed)
    rows = [
        dict(n=int(n), alpha=float(grid_alpha(n)), seed=int(s), final_clean_loss=float(c), final_eval_loss=float(e))
        for n, s, c, e in zip(member_n, member_seed, clean, evals)
    ]
    scores = [float(np.mean(evals[member_n == n])) for n in ns]
    i = select_grid_point(list(ns), scores)
    return GridSearchResult(int(ns[i]), float(grid_alpha(ns[i])), scores[i], rows)


GRID_CSV_COLUMNS = ("n", "alpha", "seed", "final_clean_loss", "final_eval_loss")


def write_grid_csv(result: GridSearchResult, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=GRID_CSV_COLUMNS)
        writer.writeheader()
        for row in result.rows:
            writer.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in GRID_CSV_COLUMNS})
