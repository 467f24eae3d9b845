"""Truncated antithetic ES outer-training of the learned optimizer."""

from __future__ import annotations

import csv
import math
import os
import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import learned_opt as lo
from . import model
from .baselines import adam_step, init_adam
from .corruptions import CorruptionSpec, corrupt_images
from .inner_loop import all_finite, draw_batches, gather, zero_members
from .model import InnerParams

ABORT_FACTOR = 2.0
LOG_COLUMNS = ("outer_iter", "wall_seconds", "trunc_len", "mean_outer_loss", "n_aborts")
SMOOTH_WINDOW = 10


# -- truncation schedule ---------------------------------------------------------


@dataclass(frozen=True)
class TruncationSchedule:
    start_len: int = 100
    end_len: int = 10_000
    ramp_iters: int = 5_000
    jitter_frac: float = 0.2

    def __post_init__(self):
        if self.start_len < 1 or self.end_len < 1:
            raise ValueError("truncation lengths must be positive")
        if self.ramp_iters < 0:
            raise ValueError("ramp_iters must be >= 0")
        if not 0.0 <= self.jitter_frac < 1.0:
            raise ValueError("jitter_frac must lie in [0, 1)")

    def base(self, outer_iter: int) -> int:
        frac = 1.0 if self.ramp_iters == 0 else min(outer_iter / self.ramp_iters, 1.0)
        return max(1, int(round(self.start_len + (self.end_len - self.start_len) * frac)))


TOY_SCHEDULE = TruncationSchedule(start_len=10, end_len=40, ramp_iters=1000, jitter_frac=0.2)


def truncation_length(outer_iter: int, sched: TruncationSchedule, rng: np.random.Generator | None = None) -> int:
    """Scheduled length, jittered uniformly over the integers in ``[base(1-j), base(1+j)]``.

    With ``rng=None`` or zero jitter the base length is returned.
    """
    if outer_iter < 0:
        raise ValueError("outer_iter must be >= 0")
    base = sched.base(outer_iter)
    if rng is None or sched.jitter_frac == 0:
        return base
    lo_len = max(1, math.ceil(base * (1 - sched.jitter_frac)))
    hi_len = max(lo_len, math.floor(base * (1 + sched.jitter_frac)))
    return int(rng.integers(lo_len, hi_len + 1))


# -- configuration ---------------------------------------------------------------


@dataclass
class ESConfig:
    sigma: float = 0.01
    pairs_per_batch: int = 16
    workers: int = field(default_factory=lambda: os.cpu_count() or 1)
    outer_lr: float = 1e-3
    outer_iters: int = 2000
    mode: str = "sync"
    staleness: int = 1
    eval_every: int = 10
    checkpoint_every: int = 100
    max_unroll_steps: int | None = None
    outer_lr_schedule: str = "constant"
    outer_beta1: float = 0.9

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if self.pairs_per_batch < 1:
            raise ValueError("pairs_per_batch must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.mode not in ("sync", "async"):
            raise ValueError(f"mode must be sync or async, got {self.mode!r}")
        if self.eval_every < 1 or self.checkpoint_every < 1:
            raise ValueError("eval_every and checkpoint_every must be >= 1")
        if self.max_unroll_steps is not None and self.max_unroll_steps < 1:
            raise ValueError("max_unroll_steps must be >= 1")
        if not 0.0 <= self.outer_beta1 < 1.0:
            raise ValueError("outer_beta1 must lie in [0, 1)")
        if self.outer_lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"outer_lr_schedule must be constant or cosine, got {self.outer_lr_schedule!r}")

    def outer_lr_at(self, outer_iter: int) -> float:
        """Outer Adam step size; ``cosine`` anneals from ``outer_lr`` to 0 over ``outer_iters``."""
        if self.outer_lr_schedule == "constant":
            return self.outer_lr
        return 0.5 * self.outer_lr * (1.0 + math.cos(math.pi * min(outer_iter, self.outer_iters) / self.outer_iters))


# -- unroll state ----------------------------------------------------------------


@dataclass
class UnrollState:
    """A population of persistent inner-training states.

    Every array carries a leading member axis. ``initial_outer_loss`` is the
    outer loss measured when the member's current inner model was created.
    """

    params: InnerParams
    opt_state: lo.LearnedOptState
    initial_outer_loss: np.ndarray

    @property
    def size(self) -> int:
        return len(self.initial_outer_loss)

    @property
    def t(self) -> np.ndarray:
        return np.asarray(self.opt_state.t)

    def take(self, index) -> "UnrollState":
        index = np.asarray(index)
        return UnrollState(
            gather(self.params, index),
            lo.LearnedOptState(gather(self.opt_state.momenta, index), np.take(self.t, index)),
            np.take(self.initial_outer_loss, index),
        )

    def put(self, index, other: "UnrollState") -> None:
        """Overwrite members ``index`` with the members of ``other``, in place."""
        for k in self.params:
            self.params[k][index] = other.params[k]
            self.opt_state.momenta[k][index] = other.opt_state.momenta[k]
        self.opt_state.t[index] = other.opt_state.t
        self.initial_outer_loss[index] = other.initial_outer_loss

    def copy(self) -> "UnrollState":
        return self.take(np.arange(self.size))


def outer_loss(params: InnerParams, arch, spec: CorruptionSpec, images: np.ndarray, labels: np.ndarray, rng) -> np.ndarray:
    """Cross-entropy on corruption-applied validation inputs (labels untouched)."""
    return model.loss(params, corrupt_images(images, spec, rng), labels, arch)


def _draw_outer_losses(task, params: InnerParams, streams, member_stream) -> np.ndarray:
    images, labels = draw_batches(task.data.valid, task.valid_batch_size, streams, member_stream, task.outer_spec)
    return model.loss(params, images, labels, task.arch)


def fresh_unrolls(task, streams: Sequence[np.random.Generator], member_stream: np.ndarray) -> UnrollState:
    """New inner models for each stream, fanned out to members, with their initial outer loss.

    Draw order per stream: the model init, then one validation eval.
    """
    per_stream = [model.init_inner(rng, task.arch) for rng in streams]
    stacked = {k: np.stack([p[k] for p in per_stream]) for k in per_stream[0]}
    params = gather(stacked, member_stream)
    initial = _draw_outer_losses(task, params, streams, member_stream)
    initial = np.where(np.isfinite(initial), initial, np.log(task.arch.num_classes))
    return UnrollState(params, lo.init_state(params), initial)


def init_unroll(task, rng: np.random.Generator) -> UnrollState:
    """A single fresh unroll (population of one)."""
    return fresh_unrolls(task, [rng], np.zeros(1, dtype=np.intp))


# -- truncations -----------------------------------------------------------------


@dataclass
class TruncationResult:
    mean_loss: np.ndarray  # (P,)
    aborted: np.ndarray  # (P,) bool
    reset: np.ndarray  # (P,) bool: reinitialized at the end (abort or horizon)
    evals: list[list[float]]  # recorded outer-loss values per member


def _theta_members(theta: lo.LearnedOptParams, index: np.ndarray | None) -> lo.LearnedOptParams:
    if index is None or theta["w1"].ndim == 2:
        return theta
    return gather(theta, index)


def run_truncations(
    thetas: lo.LearnedOptParams,
    unroll: UnrollState,
    lengths: np.ndarray,
    task,
    streams: Sequence[np.random.Generator],
    member_stream: np.ndarray,
    eval_every: int = 10,
    max_unroll_steps: int | None = None,
) -> TruncationResult:
    """Advance every member of ``unroll`` in place by its stream's truncation length.

    ``thetas`` is one optimizer or a population stacked like ``unroll``.
    ``lengths`` has one entry per stream. Each inner step samples a clean
    training minibatch; every ``eval_every`` steps and at a member's final
    step the outer loss is measured on a freshly drawn, corrupted validation
    batch. An evaluation above ``2 * initial_outer_loss`` (or a non-finite
    inner loss) aborts the member; the value recorded for it is clipped to
    that threshold. Aborted members, and members that reach
    ``max_unroll_steps``, are reinitialized from their stream at the end.
    """
    lengths = np.asarray(lengths, dtype=np.int64)
    if np.any(lengths < 1):
        raise ValueError("truncation length must be >= 1")
    P = unroll.size
    member_stream = np.asarray(member_stream, dtype=np.intp)
    member_len = lengths[member_stream]
    if max_unroll_steps is not None:
        member_len = np.minimum(member_len, np.maximum(max_unroll_steps - unroll.t, 1))
        stream_len = np.zeros(len(streams), dtype=np.int64)
        np.maximum.at(stream_len, member_stream, member_len)
        member_len = stream_len[member_stream]
    threshold = ABORT_FACTOR * unroll.initial_outer_loss
    aborted = np.zeros(P, dtype=bool)
    evals: list[list[float]] = [[] for _ in range(P)]
    stream_ids = np.arange(len(streams))
    stream_len = np.zeros(len(streams), dtype=np.int64)
    np.maximum.at(stream_len, member_stream, member_len)

    def record(members: np.ndarray, values: np.ndarray) -> None:
        for m, v in zip(members, values):
            evals[m].append(float(v))

    for step in range(1, int(member_len.max()) + 1):
        active = (step <= member_len) & ~aborted
        if not active.any():
            break
        live_streams = stream_ids[stream_len >= step]
        idx = np.flatnonzero(active)
        full = len(idx) == P
        sub = unroll if full else unroll.take(idx)
        local = {s: i for i, s in enumerate(live_streams)}
        sub_stream = np.array([local[s] for s in member_stream[idx]], dtype=np.intp)
        images, labels = draw_batches(
            task.data.train, task.batch_size, [streams[s] for s in live_streams], sub_stream
        )
        loss, grads = model.loss_and_grad(sub.params, images, labels, task.arch)
        bad = ~np.isfinite(loss) | ~all_finite(grads, len(idx))
        if bad.any():
            zero_members(grads, bad)
        theta_sub = _theta_members(thetas, None if full else idx)
        with np.errstate(all="ignore"):
            new_params, new_state, _ = lo.step(theta_sub, sub.opt_state, sub.params, grads)
        bad |= ~all_finite(new_params, len(idx))
        stepped = UnrollState(new_params, new_state, sub.initial_outer_loss)
        if full:
            unroll.params, unroll.opt_state = new_params, new_state
        else:
            unroll.put(idx, stepped)
        if bad.any():
            hit = idx[bad]
            aborted[hit] = True
            record(hit, threshold[hit])
        # outer-loss evaluation for members on an eval step or at their last step
        want = active & ~aborted & ((step % eval_every == 0) | (step == member_len))
        if want.any():
            widx = np.flatnonzero(want)
            ev_streams = np.unique(member_stream[widx])
            local = {s: i for i, s in enumerate(ev_streams)}
            ev_map = np.array([local[s] for s in member_stream[widx]], dtype=np.intp)
            with np.errstate(all="ignore"):
                values = _draw_outer_losses(
                    task, gather(unroll.params, widx), [streams[s] for s in ev_streams], ev_map
                )
            over = ~np.isfinite(values) | (values > threshold[widx])
            values = np.where(over, threshold[widx], values)
            record(widx, values)
            aborted[widx[over]] = True

    mean_loss = np.array([np.mean(e) if e else unroll.initial_outer_loss[m] for m, e in enumerate(evals)])
    reset = aborted.copy()
    if max_unroll_steps is not None:
        reset |= unroll.t >= max_unroll_steps
    if reset.any():
        ridx = np.flatnonzero(reset)
        r_streams = np.unique(member_stream[ridx])
        local = {s: i for i, s in enumerate(r_streams)}
        r_map = np.array([local[s] for s in member_stream[ridx]], dtype=np.intp)
        fresh = fresh_unrolls(task, [streams[s] for s in r_streams], r_map)
        unroll.put(ridx, fresh)
    return TruncationResult(mean_loss, aborted, reset, evals)


def run_truncation(
    theta: lo.LearnedOptParams,
    unroll: UnrollState,
    length: int,
    rng: np.random.Generator,
    task,
    eval_every: int = 10,
) -> tuple[float, UnrollState, bool]:
    """Single-unroll form: returns ``(mean_outer_loss, unroll', aborted)``."""
    unroll = unroll.copy()
    res = run_truncations(theta, unroll, np.array([length]), task, [rng], np.zeros(unroll.size, dtype=np.intp), eval_every)
    return float(res.mean_loss[0]), unroll, bool(res.aborted[0])


# -- ES gradient -----------------------------------------------------------------


def antithetic_thetas(theta: np.ndarray, eps: np.ndarray, sigma: float) -> np.ndarray:
    """Rows ``[theta + s eps_0, theta - s eps_0, theta + s eps_1, ...]``."""
    out = np.empty((2 * len(eps), theta.size))
    out[0::2] = theta + sigma * eps
    out[1::2] = theta - sigma * eps
    return out


def es_combine(eps: np.ndarray, losses: np.ndarray, sigma: float) -> np.ndarray:
    """Mean over pairs of ``eps (L+ - L-) / (2 sigma)`` with losses interleaved +,-."""
    diff = losses[0::2] - losses[1::2]
    return (eps * (diff / (2.0 * sigma))[:, None]).mean(axis=0)


def es_gradient(
    theta: np.ndarray,
    sigma: float,
    n_pairs: int,
    objective: Callable[[np.ndarray], np.ndarray],
    rng: np.random.Generator,
) -> np.ndarray:
    """Antithetic ES estimate of the gradient of ``objective`` at ``theta``.

    ``objective`` maps a ``(2 n_pairs, d)`` stack of perturbed parameters to
    their losses; it is responsible for giving both members of a pair the
    same randomness.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    theta = np.asarray(theta, dtype=np.float64)
    eps = rng.standard_normal((n_pairs, theta.size))
    losses = np.asarray(objective(antithetic_thetas(theta, eps, sigma)), dtype=np.float64)
    return es_combine(eps, losses, sigma)


# -- outer training --------------------------------------------------------------


@dataclass
class OuterRun:
    theta: np.ndarray
    log: list[dict]
    checkpoints: list[Path] = field(default_factory=list)


class _PairPool:
    """Persistent pair slots; both members of a slot share one random stream."""

    def __init__(self, task, stream_seeds: Sequence[np.random.SeedSequence]):
        self.task = task
        self.streams = [np.random.default_rng(s) for s in stream_seeds]
        self.state = fresh_unrolls(task, self.streams, np.arange(len(self.streams)))

    def run(self, slots: np.ndarray, thetas: np.ndarray, lengths: np.ndarray, config: ESConfig):
        """Evaluate interleaved +/- thetas for ``slots``; slots continue from the + member."""
        pairs = self.state.take(np.repeat(slots, 2))
        members = np.repeat(np.arange(len(slots)), 2)
        res = run_truncations(
            lo.theta_from_vector(thetas),
            pairs,
            lengths,
            self.task,
            [self.streams[s] for s in slots],
            members,
            config.eval_every,
            config.max_unroll_steps,
        )
        self.state.put(slots, pairs.take(np.arange(0, len(members), 2)))
        return res


def _write_log_header(path: Path) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerow(LOG_COLUMNS)


def _append_log(path: Path, row: dict) -> None:
    with open(path, "a", newline="") as fh:
        csv.writer(fh).writerow([_fmt(row[c]) for c in LOG_COLUMNS])


def _fmt(value) -> str:
    return repr(float(value)) if isinstance(value, (float, np.floating)) else str(value)


def read_log(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        dict(
            outer_iter=int(r["outer_iter"]),
            wall_seconds=float(r["wall_seconds"]),
            trunc_len=float(r["trunc_len"]),
            mean_outer_loss=float(r["mean_outer_loss"]),
            n_aborts=int(r["n_aborts"]),
        )
        for r in rows
    ]


def outer_train(
    config: ESConfig,
    sched: TruncationSchedule,
    task,
    seed: int,
    out_dir: str | Path | None = None,
    progress: Callable[[dict], None] | None = None,
) -> OuterRun:
    """Meta-train theta from scratch with truncated antithetic ES and outer Adam.

    Writes ``train_log.csv``, periodic ``theta_XXXXXX.bin`` checkpoints and
    ``theta_final.bin`` under ``out_dir`` when given.
    """
    root = np.random.SeedSequence(seed)
    init_seq, noise_seq, len_seq, pool_seq = root.spawn(4)
    theta = lo.theta_to_vector(lo.init_learned_opt(np.random.default_rng(init_seq)))
    pool = _PairPool(task, pool_seq.spawn(config.pairs_per_batch))
    adam = init_adam(theta, config.outer_lr, beta1=config.outer_beta1)
    out = Path(out_dir) if out_dir is not None else None
    log_path = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.csv"
        _write_log_header(log_path)
    run = OuterRun(theta, [])
    start = time.perf_counter()
    if config.mode == "sync":
        noise_rng = np.random.default_rng(noise_seq)
        len_rng = np.random.default_rng(len_seq)
        groups = _groups(config.pairs_per_batch, config.workers)
        executor = ThreadPoolExecutor(len(groups)) if len(groups) > 1 else None
        try:
            for it in range(config.outer_iters):
                lengths = np.array([truncation_length(it, sched, len_rng) for _ in range(config.pairs_per_batch)])
                eps = noise_rng.standard_normal((config.pairs_per_batch, theta.size))
                thetas = antithetic_thetas(theta, eps, config.sigma)
                results = _run_groups(pool, groups, thetas, lengths, config, executor)
                losses = np.concatenate([r.mean_loss for r in results])
                aborts = int(sum(r.aborted.sum() for r in results))
                grad = es_combine(eps, losses, config.sigma)
                theta, adam = adam_step(replace(adam, lr=config.outer_lr_at(it)), theta, grad)
                row = dict(
                    outer_iter=it,
                    wall_seconds=time.perf_counter() - start,
                    trunc_len=float(lengths.mean()),
                    mean_outer_loss=float(losses.mean()),
                    n_aborts=aborts,
                )
                _log(run, row, log_path, progress)
                _maybe_checkpoint(run, theta, it, config, out)
        finally:
            if executor is not None:
                executor.shutdown()
    else:
        theta = _outer_train_async(config, sched, pool, theta, adam, noise_seq, len_seq, run, log_path, progress, out, start)
    run.theta = theta
    if out is not None:
        run.checkpoints.append(lo.save_checkpoint(lo.theta_from_vector(theta), out / "theta_final.bin"))
    return run


def _groups(n_pairs: int, workers: int) -> list[np.ndarray]:
    return [g for g in np.array_split(np.arange(n_pairs), min(workers, n_pairs)) if len(g)]


def _run_groups(pool: _PairPool, groups, thetas, lengths, config, executor):
    def job(slots):
        rows = np.stack([2 * slots, 2 * slots + 1], axis=1).ravel()
        return pool.run(slots, thetas[rows], lengths[slots], config)

    if executor is None:
        return [job(g) for g in groups]
    return list(executor.map(job, groups))


def _log(run: OuterRun, row: dict, log_path, progress) -> None:
    run.log.append(row)
    if log_path is not None:
        _append_log(log_path, row)
    if progress is not None:
        progress(row)


def _maybe_checkpoint(run: OuterRun, theta: np.ndarray, it: int, config: ESConfig, out) -> None:
    if out is not None and (it + 1) % config.checkpoint_every == 0:
        run.checkpoints.append(lo.save_checkpoint(lo.theta_from_vector(theta), out / f"theta_{it + 1:06d}.bin"))


def _outer_train_async(config, sched, pool, theta, adam, noise_seq, len_seq, run, log_path, progress, out, start):
    """Worker groups run truncations against possibly stale theta; updates apply on arrival.

    A contribution computed from a theta more than ``staleness`` updates old
    is dropped and its group resubmitted with the current theta.
    """
    groups = _groups(config.pairs_per_batch, config.workers)
    noise_rngs = [np.random.default_rng(s) for s in noise_seq.spawn(len(groups))]
    len_rngs = [np.random.default_rng(s) for s in len_seq.spawn(len(groups))]
    version = 0

    def job(g, theta_snapshot, snap_version):
        slots = groups[g]
        lengths = np.array([truncation_length(snap_version, sched, len_rngs[g]) for _ in slots])
        eps = noise_rngs[g].standard_normal((len(slots), theta_snapshot.size))
        res = pool.run(slots, antithetic_thetas(theta_snapshot, eps, config.sigma), lengths, config)
        return g, snap_version, eps, res, lengths

    with ThreadPoolExecutor(len(groups)) as executor:
        pending = {executor.submit(job, g, theta.copy(), 0) for g in range(len(groups))}
        while version < config.outer_iters:
            done, pending = wait(pending, return_when=FIRST_COMPLETED)
            for fut in done:
                g, snap_version, eps, res, lengths = fut.result()
                if version < config.outer_iters and version - snap_version <= config.staleness:
                    grad = es_combine(eps, res.mean_loss, config.sigma)
                    theta, adam = adam_step(replace(adam, lr=config.outer_lr_at(version)), theta, grad)
                    row = dict(
                        outer_iter=version,
                        wall_seconds=time.perf_counter() - start,
                        trunc_len=float(lengths.mean()),
                        mean_outer_loss=float(res.mean_loss.mean()),
                        n_aborts=int(res.aborted.sum()),
                    )
                    _log(run, row, log_path, progress)
                    _maybe_checkpoint(run, theta, version, config, out)
                    version += 1
                if version < config.outer_iters:
                    pending.add(executor.submit(job, g, theta.copy(), version))
        wait(pending)
    return theta


# -- seed selection --------------------------------------------------------------


def smoothed_final_loss(losses: Sequence[float], window: int = SMOOTH_WINDOW) -> float:
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        return math.inf
    return float(losses[-window:].mean())


def select_best_seed(logs: Sequence, window: int = SMOOTH_WINDOW) -> int:
    """Index of the log with the lowest mean of its last ``window`` outer losses.

    Each log is a sequence of losses or of log rows with ``mean_outer_loss``.
    Ties go to the lowest index.
    """
    if len(logs) == 0:
        raise ValueError("select_best_seed needs at least one log")
    scores = []
    for log in logs:
        values = [r["mean_outer_loss"] if isinstance(r, dict) else r for r in log]
        scores.append(smoothed_final_loss(values, window))
    return int(np.argmin(scores))


def config_dict(config: ESConfig, sched: TruncationSchedule) -> dict:
    out = {f"es.{k}": v for k, v in asdict(config).items()}
    out.update({f"schedule.{k}": v for k, v in asdict(sched).items()})
    return out
