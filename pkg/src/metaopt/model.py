"""The inner classifier: a 4-layer 3x3 CNN, spatial mean, linear head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict

import numpy as np

from . import numerics as nx

InnerParams = Dict[str, np.ndarray]

N_CONV = 4


@dataclass(frozen=True)
class ArchConfig:
    in_channels: int = 3
    image_size: int = 32
    channels: tuple[int, ...] = (32, 32, 64, 64)
    strides: tuple[int, ...] = (2, 2, 1, 1)
    num_classes: int = 10

    @classmethod
    def toy(cls) -> "ArchConfig":
        return cls(image_size=8, channels=(8, 8, 16, 16), num_classes=4)

    def param_names(self) -> list[str]:
        names = []
        for i in range(1, len(self.channels) + 1):
            names += [f"conv{i}_w", f"conv{i}_b"]
        return names + ["fc_w", "fc_b"]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        cin = self.in_channels
        for i, cout in enumerate(self.channels, start=1):
            shapes[f"conv{i}_w"] = (cout, cin, 3, 3)
            shapes[f"conv{i}_b"] = (cout,)
            cin = cout
        shapes["fc_w"] = (cin, self.num_classes)
        shapes["fc_b"] = (self.num_classes,)
        return shapes

    def spatial_sizes(self) -> list[int]:
        sizes, s = [], self.image_size
        for stride in self.strides:
            s = nx.same_padding(s, stride)[0]
            sizes.append(s)
        return sizes

    def n_params(self) -> int:
        return int(sum(np.prod(s) for s in self.param_shapes().values()))


def init_inner(rng: np.random.Generator, arch: ArchConfig = ArchConfig(), population: int | None = None) -> InnerParams:
    """He-normal weights (std sqrt(2 / fan_in)) and zero biases.

    With ``population`` set, every tensor gains a leading axis of that size and
    each member is drawn independently.
    """
    lead = () if population is None else (population,)
    params: InnerParams = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith("_b"):
            params[name] = np.zeros(lead + shape)
        else:
            fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
            params[name] = rng.standard_normal(lead + shape) * np.sqrt(2.0 / fan_in)
    return params


DENSE_CONV_LIMIT = 1 << 16


def _conv_forward(h: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int):
    B, H, W, cin = h.shape[-4:]
    cout = weight.shape[-4]
    Ho, Wo = nx.same_padding(H, stride)[0], nx.same_padding(W, stride)[0]
    if H * W * cin * Ho * Wo * cout <= DENSE_CONV_LIMIT:
        plan = nx.dense_conv_plan(H, W, cin, cout, stride)
        flat = h.reshape(h.shape[:-3] + (plan.d_in,))
        matrix = plan.matrix(weight)
        out = flat @ matrix
        pre = out.reshape(out.shape[:-1] + plan.shape_out) + bias[..., None, None, None, :]
        return pre, ("dense", h.shape, plan, flat, matrix)
    pre, cols = nx.conv2d_nhwc(h, weight, bias, stride)
    return pre, ("cols", h.shape, cols)


def _conv_backward(dpre: np.ndarray, weight: np.ndarray, stride: int, cache, need_input_grad: bool):
    if cache[0] == "cols":
        return nx.conv2d_nhwc_backward(dpre, cache[1], weight, stride, cache[2], need_input_grad)
    _, in_shape, plan, flat, matrix = cache
    dflat = dpre.reshape(dpre.shape[:-3] + (plan.d_out,))
    dmatrix = np.swapaxes(flat, -1, -2) @ dflat
    dbias = dflat.reshape(dflat.shape[:-1] + (-1, weight.shape[-4])).sum(axis=(-3, -2))
    while dmatrix.ndim > matrix.ndim:
        dmatrix = dmatrix.sum(axis=0)
        dbias = dbias.sum(axis=0)
    dweight = plan.kernel_grad(dmatrix, weight.shape)
    if not need_input_grad:
        return None, dweight, dbias
    dh = (dflat @ np.swapaxes(matrix, -1, -2)).reshape(dflat.shape[:-1] + in_shape[-3:])
    return dh, dweight, dbias


def _forward(params: InnerParams, images: np.ndarray, arch: ArchConfig):
    if images.shape[-3:] != (arch.in_channels, arch.image_size, arch.image_size):
        raise nx.ShapeError(
            f"images must end in {(arch.in_channels, arch.image_size, arch.image_size)}, got {images.shape}"
        )
    cache = []
    h = np.ascontiguousarray(np.moveaxis(images, -3, -1))
    for i, stride in enumerate(arch.strides, start=1):
        pre, c = _conv_forward(h, params[f"conv{i}_w"], params[f"conv{i}_b"], stride)
        cache.append((c, pre))
        h = nx.relu(pre)
    pooled = h.mean(axis=(-3, -2))
    logits = nx.linear(pooled, params["fc_w"], params["fc_b"])
    return logits, (cache, h.shape, pooled)


def forward(params: InnerParams, images: np.ndarray, arch: ArchConfig = ArchConfig()) -> np.ndarray:
    """Logits of shape ``(..., B, num_classes)``."""
    return _forward(params, images, arch)[0]


def loss_and_grad(
    params: InnerParams, images: np.ndarray, labels: np.ndarray, arch: ArchConfig = ArchConfig()
) -> tuple[np.ndarray, InnerParams]:
    """Mean cross-entropy and exact gradients for every tensor.

    A non-finite loss is returned as-is; callers treat it as divergence.
    """
    if images.shape[-4] == 0:
        raise ValueError("empty batch")
    with np.errstate(all="ignore"):
        logits, (cache, last_shape, pooled) = _forward(params, images, arch)
        loss, dlogits = nx.softmax_cross_entropy(logits, labels)
        grads: InnerParams = {}
        dpooled, grads["fc_w"], grads["fc_b"] = nx.linear_backward(dlogits, pooled, params["fc_w"])
        H, W = last_shape[-3:-1]
        dh = np.broadcast_to((dpooled / (H * W))[..., None, None, :], last_shape)
        for i in range(len(arch.strides), 0, -1):
            c, pre = cache[i - 1]
            dpre = nx.relu_backward(dh, pre)
            dh, grads[f"conv{i}_w"], grads[f"conv{i}_b"] = _conv_backward(
                dpre, params[f"conv{i}_w"], arch.strides[i - 1], c, need_input_grad=i > 1
            )
    return loss, {name: grads[name] for name in arch.param_names()}


def loss(params: InnerParams, images: np.ndarray, labels: np.ndarray, arch: ArchConfig = ArchConfig()) -> np.ndarray:
    with np.errstate(all="ignore"):
        logits = forward(params, images, arch)
        return nx.softmax_cross_entropy(logits, labels)[0]


def relu_pattern(params: InnerParams, images: np.ndarray, arch: ArchConfig = ArchConfig()) -> np.ndarray:
    """Concatenated activation mask of every ReLU; used to detect kink crossings."""
    _, (cache, _, _) = _forward(params, images, arch)
    return np.concatenate([(pre > 0).ravel() for _, pre in cache])


def loss_and_pattern(
    params: InnerParams, images: np.ndarray, labels: np.ndarray, arch: ArchConfig = ArchConfig()
) -> tuple[np.ndarray, np.ndarray]:
    """Loss and ReLU masks of a population in one pass; masks are ``(P, M)``."""
    with np.errstate(all="ignore"):
        logits, (cache, _, _) = _forward(params, images, arch)
        loss = nx.softmax_cross_entropy(logits, labels)[0]
    P = logits.shape[0]
    return loss, np.concatenate([(pre > 0).reshape(P, -1) for _, pre in cache], axis=1)


def flatten(params: InnerParams) -> np.ndarray:
    return np.concatenate([v.ravel() for v in params.values()])


def unflatten(vector: np.ndarray, like: InnerParams) -> InnerParams:
    out, i = {}, 0
    for name, v in like.items():
        out[name] = vector[i : i + v.size].reshape(v.shape)
        i += v.size
    return out


def take(params: InnerParams, index) -> InnerParams:
    """Select population members along the leading axis."""
    return {k: v[index] for k, v in params.items()}
