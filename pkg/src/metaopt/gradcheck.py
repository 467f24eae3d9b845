"""Finite-difference checks of every analytic backward pass."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model
from . import numerics as nx

FD_EPS = 1e-5
TOLERANCE = 1e-6
CHUNK = 128


@dataclass
class CheckResult:
    name: str
    rel_error: float
    n_checked: int
    n_kinks: int = 0

    @property
    def ok(self) -> bool:
        return self.rel_error <= TOLERANCE


def _check(name: str, objective, x: np.ndarray, analytic: np.ndarray, eps: float = FD_EPS) -> CheckResult:
    numeric = nx.finite_diff_grad(objective, x, eps)
    return CheckResult(name, nx.relative_error(analytic, numeric), x.size)


def check_layers(rng: np.random.Generator) -> list[CheckResult]:
    """conv2d (both strides), relu, spatial_mean, linear and softmax cross-entropy."""
    out = []
    for stride in (1, 2):
        B, cin, cout = 2, 2, 3
        H = int(rng.integers(3, 7))
        x = rng.standard_normal((B, cin, H, H))
        w = rng.standard_normal((cout, cin, 3, 3))
        b = rng.standard_normal(cout)
        up = rng.standard_normal(nx.conv2d(x, w, b, stride).shape)
        dx, dw, db = nx.conv2d_backward(up, x, w, stride)
        out.append(_check(f"conv2d_s{stride}.input", lambda v: np.sum(up * nx.conv2d(v, w, b, stride)), x, dx))
        out.append(_check(f"conv2d_s{stride}.weight", lambda v: np.sum(up * nx.conv2d(x, v, b, stride)), w, dw))
        out.append(_check(f"conv2d_s{stride}.bias", lambda v: np.sum(up * nx.conv2d(x, w, v, stride)), b, db))

    x = rng.standard_normal((2, 3, 4, 4))
    x[np.abs(x) < 1e-3] = 0.5  # stay off the kink
    up = rng.standard_normal(x.shape)
    out.append(_check("relu", lambda v: np.sum(up * nx.relu(v)), x, nx.relu_backward(up, x)))

    up = rng.standard_normal((2, 3))
    out.append(
        _check("spatial_mean", lambda v: np.sum(up * nx.spatial_mean(v)), x, nx.spatial_mean_backward(up, x.shape))
    )

    xi = rng.standard_normal((3, 5))
    w = rng.standard_normal((5, 4))
    b = rng.standard_normal(4)
    up = rng.standard_normal((3, 4))
    dx, dw, db = nx.linear_backward(up, xi, w)
    out.append(_check("linear.input", lambda v: np.sum(up * nx.linear(v, w, b)), xi, dx))
    out.append(_check("linear.weight", lambda v: np.sum(up * nx.linear(xi, v, b)), w, dw))
    out.append(_check("linear.bias", lambda v: np.sum(up * nx.linear(xi, w, v)), b, db))

    logits = rng.standard_normal((4, 5)) * 3
    labels = rng.integers(0, 5, 4)
    _, dlogits = nx.softmax_cross_entropy(logits, labels)
    out.append(_check("softmax_cross_entropy", lambda v: nx.softmax_cross_entropy(v, labels)[0], logits, dlogits))
    return out


def check_inner_model(rng: np.random.Generator, arch: model.ArchConfig | None = None, batch: int = 4) -> CheckResult:
    """Full inner-model gradient against central differences.

    Coordinates whose +-eps perturbation flips any ReLU are kinks of the
    objective where central differences are not a valid oracle; they are
    excluded and counted.
    """
    arch = arch or model.ArchConfig.toy()
    params = model.init_inner(rng, arch)
    for k in params:
        if k.endswith("_b"):
            params[k] = rng.standard_normal(params[k].shape) * 0.1
    images = rng.random((batch, arch.in_channels, arch.image_size, arch.image_size))
    labels = rng.integers(0, arch.num_classes, batch)
    _, grads = model.loss_and_grad(params, images, labels, arch)
    flat = model.flatten(params)
    analytic = model.flatten(grads)
    base_pattern = model.relu_pattern(params, images, arch)

    numeric = np.zeros_like(flat)
    keep = np.ones(flat.size, dtype=bool)
    # perturbed copies are evaluated as one population, CHUNK coordinates at a time
    for start in range(0, flat.size, CHUNK):
        idx = np.arange(start, min(start + CHUNK, flat.size))
        pop = np.repeat(flat[None], 2 * len(idx), axis=0)
        rows = np.arange(len(idx))
        pop[2 * rows, idx] += FD_EPS
        pop[2 * rows + 1, idx] -= FD_EPS
        losses, patterns = model.loss_and_pattern(_unflatten_pop(pop, params), images, labels, arch)
        if not np.all(np.isfinite(losses)):
            raise nx.EvaluationError("non-finite loss in finite-difference evaluation")
        numeric[idx] = (losses[0::2] - losses[1::2]) / (2 * FD_EPS)
        flipped = (patterns != base_pattern).any(axis=1)
        keep[idx] = ~(flipped[0::2] | flipped[1::2])
    err = nx.relative_error(analytic[keep], numeric[keep])
    return CheckResult("inner_model", err, int(keep.sum()), int((~keep).sum()))


def _unflatten_pop(pop: np.ndarray, like: model.InnerParams) -> model.InnerParams:
    out, i = {}, 0
    for name, v in like.items():
        out[name] = pop[:, i : i + v.size].reshape((len(pop),) + v.shape)
        i += v.size
    return out


def run_suite(seed: int = 0, n_model_configs: int = 20) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = check_layers(rng)
    for _ in range(n_model_configs):
        results.append(check_inner_model(rng))
    return results
