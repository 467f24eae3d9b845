"""Input corruptions: parametric Gaussian noise and a nine-kind severity family."""

from __future__ import annotations

import threading
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import ndimage

from .dataset import ImageBatch

TRAIN_KINDS = (
    "gaussian_noise",
    "shot_noise",
    "impulse_noise",
    "defocus_blur",
    "zoom_blur",
    "brightness",
    "contrast",
)
TEST_KINDS = ("glass_blur", "fog")
SEVERITY_KINDS = TRAIN_KINDS + TEST_KINDS
KINDS = ("identity", "gaussian_sigma") + SEVERITY_KINDS
DETERMINISTIC_KINDS = ("identity", "defocus_blur", "zoom_blur", "brightness", "contrast")
TRAIN_SEVERITIES = (1, 2, 3)
TABLE_VERSION = 1


class CorruptionSpecError(ValueError):
    """Invalid corruption kind, severity or sigma."""


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str = "identity"
    severity: int = 1
    sigma: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise CorruptionSpecError(f"unknown corruption kind {self.kind!r}")
        if not 1 <= int(self.severity) <= 5:
            raise CorruptionSpecError(f"severity must be in 1..5, got {self.severity}")
        if not self.sigma >= 0:
            raise CorruptionSpecError(f"sigma must be >= 0, got {self.sigma}")

    @classmethod
    def gaussian(cls, sigma: float) -> "CorruptionSpec":
        return cls("gaussian_sigma", sigma=float(sigma))

    def label(self) -> str:
        if self.kind == "identity":
            return "identity"
        if self.kind == "gaussian_sigma":
            return f"gaussian_sigma:{self.sigma:g}"
        return f"{self.kind}:{self.severity}"

    @classmethod
    def parse(cls, text: str) -> "CorruptionSpec":
        """Inverse of :meth:`label`: ``identity``, ``gaussian_sigma:0.05``, ``fog:3``."""
        kind, _, arg = text.strip().partition(":")
        if kind == "identity":
            return cls()
        if kind == "gaussian_sigma":
            return cls.gaussian(float(arg))
        return cls(kind, severity=int(arg or 1))


IDENTITY = CorruptionSpec()


# -- instrumentation -------------------------------------------------------------


class _CallCounter:
    """Counts :func:`apply_corruption` invocations; used to prove clean inner paths."""

    def __init__(self):
        self._lock = threading.Lock()
        self.count = 0

    def increment(self) -> None:
        with self._lock:
            self.count += 1


CALLS = _CallCounter()


# -- severity table --------------------------------------------------------------


def parse_severity_table(text: str) -> dict[str, list[tuple[float, ...]]]:
    table: dict[str, dict[int, tuple[float, ...]]] = {}
    version = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("version"):
            version = int(line.split("=", 1)[1])
            continue
        kind, sev, *params = line.split()
        if kind not in SEVERITY_KINDS:
            raise CorruptionSpecError(f"severity table line {lineno}: unknown kind {kind!r}")
        table.setdefault(kind, {})[int(sev)] = tuple(float(p) for p in params)
    if version != TABLE_VERSION:
        raise CorruptionSpecError(f"severity table version {version} != {TABLE_VERSION}")
    out = {}
    for kind in SEVERITY_KINDS:
        rows = table.get(kind, {})
        if sorted(rows) != [1, 2, 3, 4, 5]:
            raise CorruptionSpecError(f"severity table must list severities 1-5 for {kind}")
        out[kind] = [rows[s] for s in range(1, 6)]
    return out


@lru_cache(maxsize=None)
def _load_table(path: str | None) -> dict[str, list[tuple[float, ...]]]:
    if path is None:
        text = resources.files("metaopt").joinpath("data/severity_table.txt").read_text()
    else:
        text = Path(path).read_text()
    return parse_severity_table(text)


_table_path: str | None = None


def set_severity_table(path: str | Path | None) -> None:
    """Use a different table file for subsequent corruptions (None = bundled)."""
    global _table_path
    _table_path = None if path is None else str(path)
    _load_table(_table_path)


def severity_table() -> dict[str, list[tuple[float, ...]]]:
    return _load_table(_table_path)


def params_for(spec: CorruptionSpec) -> tuple[float, ...]:
    return severity_table()[spec.kind][spec.severity - 1]


def monotone_magnitudes(kind: str) -> list[list[float]]:
    """Per-severity strength values that must be nondecreasing in severity."""
    rows = severity_table()[kind]
    if kind == "shot_noise":
        return [[1.0 / r[0]] for r in rows]
    if kind == "contrast":
        return [[abs(1.0 - r[0])] for r in rows]
    return [list(r) for r in rows]


# -- individual corruptions ------------------------------------------------------


def disk_kernel(radius: float) -> np.ndarray:
    """Normalized disk with a one-pixel linear edge ramp so fractional radii differ."""
    half = int(np.ceil(radius))
    ax = np.arange(-half, half + 1)
    yy, xx = np.meshgrid(ax, ax, indexing="ij")
    k = np.clip(radius + 0.5 - np.sqrt(yy**2 + xx**2), 0.0, 1.0)
    return k / k.sum()


def _bilinear_zoom(x: np.ndarray, factor: float) -> np.ndarray:
    """Zoom into the image center by ``factor`` (>= 1), keeping the size."""
    H, W = x.shape[-2:]
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    ys = cy + (np.arange(H) - cy) / factor
    xs = cx + (np.arange(W) - cx) / factor
    y0 = np.clip(np.floor(ys).astype(int), 0, H - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = x[..., y0[:, None], x0[None, :]] * (1 - wx) + x[..., y0[:, None], x1[None, :]] * wx
    bot = x[..., y1[:, None], x0[None, :]] * (1 - wx) + x[..., y1[:, None], x1[None, :]] * wx
    return top * (1 - wy) + bot * wy


def plasma_fractal(size: int, rng: np.random.Generator, decay: float = 2.0) -> np.ndarray:
    """Diamond-square plasma on a wrap-around grid, rescaled to [0, 1].

    ``size`` is rounded up to a power of two; callers crop.
    """
    mapsize = 1 << max(2, int(np.ceil(np.log2(size))))
    grid = np.zeros((mapsize, mapsize))
    step = mapsize
    wibble = 1.0

    def wibbled(arr):
        return arr / 4 + wibble * rng.uniform(-1.0, 1.0, arr.shape)

    while step >= 2:
        half = step // 2
        corners = grid[0:mapsize:step, 0:mapsize:step]
        square = corners + np.roll(corners, -1, axis=0)
        square = square + np.roll(square, -1, axis=1)
        grid[half:mapsize:step, half:mapsize:step] = wibbled(square)
        centers = grid[half:mapsize:step, half:mapsize:step]
        corners = grid[0:mapsize:step, 0:mapsize:step]
        ltsum = centers + np.roll(centers, 1, axis=0) + corners + np.roll(corners, -1, axis=1)
        grid[0:mapsize:step, half:mapsize:step] = wibbled(ltsum)
        ttsum = centers + np.roll(centers, 1, axis=1) + corners + np.roll(corners, -1, axis=0)
        grid[half:mapsize:step, 0:mapsize:step] = wibbled(ttsum)
        step = half
        wibble /= decay
    grid -= grid.min()
    peak = grid.max()
    return grid / peak if peak > 0 else grid


def _glass_swaps(x: np.ndarray, rounds: int, rng: np.random.Generator) -> np.ndarray:
    x = x.copy()
    B, _, H, W = x.shape
    rows = np.arange(B)
    for _ in range(rounds):
        for h in range(H - 1, -1, -1):
            for w in range(W - 1, -1, -1):
                dy, dx = rng.integers(-1, 2, size=(2, B))
                h2 = np.clip(h + dy, 0, H - 1)
                w2 = np.clip(w + dx, 0, W - 1)
                here = x[rows, :, h, w].copy()
                x[rows, :, h, w] = x[rows, :, h2, w2]
                x[rows, :, h2, w2] = here
    return x


def _corrupt(images: np.ndarray, spec: CorruptionSpec, rng: np.random.Generator) -> np.ndarray:
    kind = spec.kind
    if kind == "identity":
        return images.copy()
    if kind == "gaussian_sigma":
        if spec.sigma == 0:
            return images.copy()
        return images + rng.normal(0.0, spec.sigma, size=images.shape)
    p = params_for(spec)
    if kind == "gaussian_noise":
        return images + rng.normal(0.0, p[0], size=images.shape)
    if kind == "shot_noise":
        return rng.poisson(images * p[0]) / p[0]
    if kind == "impulse_noise":
        hit = rng.random(images.shape) < p[0]
        salt = rng.random(images.shape) < 0.5
        return np.where(hit, salt.astype(np.float64), images)
    if kind == "defocus_blur":
        k = disk_kernel(p[0])
        return ndimage.convolve(images, k[None, None], mode="reflect")
    if kind == "zoom_blur":
        factors = np.arange(1.0, p[0] + 1e-9, 0.01)
        acc = images.copy()
        for f in factors[1:]:
            acc += _bilinear_zoom(images, f)
        return acc / len(factors)
    if kind == "brightness":
        return images + p[0]
    if kind == "contrast":
        mean = images.mean(axis=(-3, -2, -1), keepdims=True)
        return (images - mean) * p[0] + mean
    if kind == "glass_blur":
        blurred = ndimage.gaussian_filter(images, sigma=(0, 0, p[0], p[0]), mode="reflect")
        return _glass_swaps(blurred, int(p[1]), rng)
    if kind == "fog":
        B, _, H, W = images.shape
        fog = np.stack([plasma_fractal(max(H, W), rng)[:H, :W] for _ in range(B)])
        return (1.0 - p[0]) * images + p[0] * fog[:, None]
    raise CorruptionSpecError(f"unknown corruption kind {kind!r}")


def corrupt_images(images: np.ndarray, spec: CorruptionSpec, rng: np.random.Generator) -> np.ndarray:
    """Corrupt an array ``(..., B, C, H, W)`` in [0, 1]; output clipped to [0, 1]."""
    CALLS.increment()
    lead = images.shape[:-4]
    flat = images.reshape((-1,) + images.shape[-3:])
    out = _corrupt(flat, spec, rng)
    return np.clip(out, 0.0, 1.0).reshape(lead + images.shape[-4:])


def apply_corruption(batch: ImageBatch, spec: CorruptionSpec, rng: np.random.Generator) -> ImageBatch:
    return ImageBatch(corrupt_images(batch.images, spec, rng), batch.labels)


def sample_train_corruption(rng: np.random.Generator) -> CorruptionSpec:
    """Uniform over the seven outer-train kinds and severities 1-3."""
    kind = TRAIN_KINDS[int(rng.integers(len(TRAIN_KINDS)))]
    severity = TRAIN_SEVERITIES[int(rng.integers(len(TRAIN_SEVERITIES)))]
    return CorruptionSpec(kind, severity=severity)
