"""Experiment configuration: key = value files, METAOPT_* env vars, CLI overrides.

Precedence is CLI > config file > environment > task defaults.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

from .outer import TOY_SCHEDULE, ESConfig, TruncationSchedule

ENV_PREFIX = "METAOPT_"
RESOLVED_NAME = "resolved_config.txt"


class ConfigError(ValueError):
    """Malformed configuration value or file."""


def _parse_seeds(text: str) -> tuple[int, ...]:
    parts = text.replace(",", " ").split()
    if not parts:
        raise ConfigError("seed list is empty")
    return tuple(int(p) for p in parts)


def _optional_int(text: str) -> int | None:
    return None if text.strip().lower() in ("none", "") else int(text)


def _optional_str(text: str) -> str | None:
    return None if text.strip().lower() in ("none", "") else text.strip()


@dataclass
class ExperimentConfig:
    task: str = "toy"
    data_dir: str | None = None
    out_dir: str = "runs"
    seeds: tuple[int, ...] = (0,)
    severity_table: str | None = None
    # outer training
    sigma: float = 0.01
    pairs_per_batch: int = 16
    workers: int = 1
    outer_lr: float = 1e-3
    outer_iters: int = 2000
    mode: str = "sync"
    staleness: int = 1
    eval_every: int = 10
    checkpoint_every: int = 100
    max_unroll_steps: int | None = None
    outer_lr_schedule: str = "constant"
    outer_beta1: float = 0.9
    # truncation schedule
    start_len: int = 100
    end_len: int = 10_000
    ramp_iters: int = 5_000
    jitter_frac: float = 0.2
    # inner problem
    batch_size: int = 64
    valid_batch_size: int = 64
    inner_steps: int = 10_000
    toy_n_per_class: int = 1000
    toy_seed: int = 0

    def es_config(self) -> ESConfig:
        return ESConfig(
            sigma=self.sigma,
            pairs_per_batch=self.pairs_per_batch,
            workers=self.workers,
            outer_lr=self.outer_lr,
            outer_iters=self.outer_iters,
            mode=self.mode,
            staleness=self.staleness,
            eval_every=self.eval_every,
            checkpoint_every=self.checkpoint_every,
            max_unroll_steps=self.max_unroll_steps,
            outer_lr_schedule=self.outer_lr_schedule,
            outer_beta1=self.outer_beta1,
        )

    def schedule(self) -> TruncationSchedule:
        return TruncationSchedule(self.start_len, self.end_len, self.ramp_iters, self.jitter_frac)

    def make_task(self):
        from .tasks import make_task

        if self.task == "toy":
            return make_task(
                "toy",
                n_per_class=self.toy_n_per_class,
                seed=self.toy_seed,
                batch_size=self.batch_size,
                valid_batch_size=self.valid_batch_size,
            )
        return make_task(self.task, self.data_dir, batch_size=self.batch_size, valid_batch_size=self.valid_batch_size)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                text = "none"
            elif f.name == "seeds":
                text = " ".join(str(s) for s in value)
            elif isinstance(value, float):
                text = repr(value)
            else:
                text = str(value)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path) -> Path:
        path = Path(out_dir) / RESOLVED_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path


_PARSERS = {
    "task": str,
    "data_dir": _optional_str,
    "out_dir": str,
    "seeds": _parse_seeds,
    "severity_table": _optional_str,
    "sigma": float,
    "pairs_per_batch": int,
    "workers": int,
    "outer_lr": float,
    "outer_iters": int,
    "mode": str,
    "staleness": int,
    "eval_every": int,
    "checkpoint_every": int,
    "max_unroll_steps": _optional_int,
    "outer_lr_schedule": str,
    "outer_beta1": float,
    "start_len": int,
    "end_len": int,
    "ramp_iters": int,
    "jitter_frac": float,
    "batch_size": int,
    "valid_batch_size": int,
    "inner_steps": int,
    "toy_n_per_class": int,
    "toy_seed": int,
}
KEYS = tuple(_PARSERS)

TOY_DEFAULTS = dict(
    start_len=TOY_SCHEDULE.start_len,
    end_len=TOY_SCHEDULE.end_len,
    ramp_iters=TOY_SCHEDULE.ramp_iters,
    jitter_frac=TOY_SCHEDULE.jitter_frac,
    max_unroll_steps=150,
    inner_steps=150,
    batch_size=16,
    valid_batch_size=256,
    outer_lr=1e-2,
    outer_lr_schedule="cosine",
)
CIFAR_DEFAULTS = dict(max_unroll_steps=10_000, inner_steps=10_000)


def task_defaults(task: str) -> dict[str, Any]:
    base = {f.name: f.default for f in fields(ExperimentConfig)}
    base["workers"] = os.cpu_count() or 1
    base["task"] = task
    base.update(TOY_DEFAULTS if task == "toy" else CIFAR_DEFAULTS)
    if task == "corruption":
        base["seeds"] = (0, 1, 2, 3)
    elif task in ("toy", "gaussian"):
        base["seeds"] = (0, 1, 2)
    return base


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key] = _convert(key, value, f"{source}:{lineno}")
    return out


def read_config_file(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), str(path))


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, Any]:
    environ = os.environ if environ is None else environ
    out = {}
    for key in KEYS:
        name = ENV_PREFIX + key.upper()
        if name in environ:
            out[key] = _convert(key, environ[name], name)
    return out


def _convert(key: str, value, where: str):
    if key not in _PARSERS:
        raise ConfigError(f"{where}: unknown config key {key!r}")
    if not isinstance(value, str):
        return value
    try:
        return _PARSERS[key](value)
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value {value!r} for {key}: {exc}") from None


def resolve(
    cli: Mapping[str, Any] | None = None,
    config_file: str | Path | None = None,
    environ: Mapping[str, str] | None = None,
) -> ExperimentConfig:
    """Merge the four layers; task-specific defaults follow the resolved task."""
    cli = {k: v for k, v in (cli or {}).items() if v is not None}
    file_values = read_config_file(config_file) if config_file else {}
    env_values = env_overrides(environ)
    layers = [env_values, file_values, {k: _convert(k, v, "command line") for k, v in cli.items()}]
    task = "toy"
    for layer in layers:
        task = layer.get("task", task)
    merged = task_defaults(task)
    for layer in layers:
        merged.update(layer)
    if merged["data_dir"] is None and task != "toy":
        merged["data_dir"] = os.environ.get("METAOPT_DATA_DIR") if environ is None else environ.get("METAOPT_DATA_DIR")
    config = ExperimentConfig(**merged)
    validate(config)
    return config


def validate(config: ExperimentConfig) -> None:
    from .tasks import TASK_NAMES

    if config.task not in TASK_NAMES:
        raise ConfigError(f"unknown task {config.task!r}; expected one of {', '.join(TASK_NAMES)}")
    if not config.seeds:
        raise ConfigError("seed list is empty")
    if config.task != "toy":
        if not config.data_dir:
            raise ConfigError(f"task {config.task!r} needs --data-dir or METAOPT_DATA_DIR")
        if not Path(config.data_dir).is_dir():
            raise ConfigError(f"data directory does not exist: {config.data_dir}")
    if config.severity_table and not Path(config.severity_table).is_file():
        raise ConfigError(f"severity table not found: {config.severity_table}")
    try:
        config.es_config()
        config.schedule()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if config.batch_size < 1 or config.valid_batch_size < 1 or config.inner_steps < 1:
        raise ConfigError("batch sizes and inner_steps must be >= 1")
