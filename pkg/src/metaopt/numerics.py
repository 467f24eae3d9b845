"""Dense float64 layer primitives with hand-derived backward passes.

Every function accepts optional leading "population" axes in front of the
usual layout, so a stack of independent models can be evaluated in a single
call: ``input[..., B, C, H, W]`` pairs with ``weight[..., Cout, Cin, 3, 3]``.
The leading axes of input and weight must broadcast against each other.
"""

from __future__ import annotations

import functools
from typing import Callable

import numpy as np

KERNEL = 3


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class EvaluationError(ArithmeticError):
    """Raised when an objective produces a non-finite value."""


def same_padding(size: int, stride: int) -> tuple[int, int, int]:
    """Return ``(out, pad_before, pad_after)`` for SAME padding of a 3-wide kernel."""
    out = -(-size // stride)
    total = max((out - 1) * stride + KERNEL - size, 0)
    return out, total // 2, total - total // 2


def _check_conv(input: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int) -> None:
    if stride not in (1, 2):
        raise ShapeError(f"stride must be 1 or 2, got {stride}")
    if input.ndim < 4:
        raise ShapeError(f"conv2d input must be at least 4-d, got shape {input.shape}")
    if weight.ndim < 4 or weight.shape[-2:] != (KERNEL, KERNEL):
        raise ShapeError(f"conv2d weight must end in (Cout, Cin, 3, 3), got {weight.shape}")
    if input.shape[-3] != weight.shape[-3]:
        raise ShapeError(
            f"input channels {input.shape[-3]} do not match weight channels {weight.shape[-3]}"
        )
    if bias.shape[-1] != weight.shape[-4]:
        raise ShapeError(f"bias length {bias.shape[-1]} does not match Cout {weight.shape[-4]}")


def _pad_nhwc(x: np.ndarray, stride: int) -> tuple[np.ndarray, int, int, int, int]:
    H, W = x.shape[-3:-1]
    Ho, pt, pb = same_padding(H, stride)
    Wo, pl, pr = same_padding(W, stride)
    pad = [(0, 0)] * (x.ndim - 3) + [(pt, pb), (pl, pr), (0, 0)]
    return np.pad(x, pad), Ho, Wo, pt, pl


def _im2col_nhwc(x: np.ndarray, stride: int) -> np.ndarray:
    """Patches of shape ``(..., B, Ho, Wo, 9*Cin)`` ordered (ki, kj, cin)."""
    padded, Ho, Wo, _, _ = _pad_nhwc(x, stride)
    cin = x.shape[-1]
    cols = np.empty(x.shape[:-3] + (Ho, Wo, KERNEL * KERNEL * cin))
    for ki in range(KERNEL):
        for kj in range(KERNEL):
            k = (ki * KERNEL + kj) * cin
            cols[..., k : k + cin] = padded[..., ki : ki + stride * Ho : stride, kj : kj + stride * Wo : stride, :]
    return cols


def _weight_matrix(weight: np.ndarray) -> np.ndarray:
    """(..., Cout, Cin, 3, 3) -> (..., 9*Cin, Cout) matching the patch order."""
    nd = weight.ndim
    order = list(range(nd - 4)) + [nd - 2, nd - 1, nd - 3, nd - 4]
    w = weight.transpose(order)
    return w.reshape(w.shape[:-4] + (-1, weight.shape[-4]))


def conv2d_nhwc(
    x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int
) -> tuple[np.ndarray, np.ndarray]:
    """Channels-last convolution ``x[..., B, H, W, Cin] -> [..., B, Ho, Wo, Cout]``.

    Also returns the patch matrix so the backward pass can reuse it.
    """
    cols = _im2col_nhwc(x, stride)
    B, Ho, Wo, K = cols.shape[-4:]
    flat = cols.reshape(cols.shape[:-4] + (B * Ho * Wo, K))
    out = flat @ _weight_matrix(weight) + bias[..., None, :]
    return out.reshape(out.shape[:-2] + (B, Ho, Wo, -1)), cols


def conv2d_nhwc_backward(
    upstream: np.ndarray,
    x_shape: tuple[int, ...],
    weight: np.ndarray,
    stride: int,
    cols: np.ndarray,
    need_input_grad: bool = True,
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    B, H, W, cin = x_shape[-4:]
    Ho, pt, pb = same_padding(H, stride)
    Wo, pl, pr = same_padding(W, stride)
    cout = weight.shape[-4]
    N = B * Ho * Wo
    up_flat = upstream.reshape(upstream.shape[:-4] + (N, cout))
    cols_flat = cols.reshape(cols.shape[:-4] + (N, cols.shape[-1]))
    dwm = np.swapaxes(cols_flat, -1, -2) @ up_flat
    # (..., 3, 3, Cin, Cout) -> (..., Cout, Cin, 3, 3)
    dw = dwm.reshape(dwm.shape[:-2] + (KERNEL, KERNEL, cin, cout))
    nd = dw.ndim
    dweight = dw.transpose(list(range(nd - 4)) + [nd - 1, nd - 2, nd - 4, nd - 3])
    dbias = up_flat.sum(axis=-2)
    # reduce any broadcast population axes back onto the weight's shape
    while dweight.ndim > weight.ndim:
        dweight = dweight.sum(axis=0)
        dbias = dbias.sum(axis=0)
    dweight = np.ascontiguousarray(dweight)
    if not need_input_grad:
        return None, dweight, dbias

    dcols = up_flat @ np.swapaxes(_weight_matrix(weight), -1, -2)
    dcols = dcols.reshape(dcols.shape[:-2] + (B, Ho, Wo, KERNEL * KERNEL * cin))
    dpad = np.zeros(dcols.shape[:-4] + (B, H + pt + pb, W + pl + pr, cin))
    for ki in range(KERNEL):
        for kj in range(KERNEL):
            k = (ki * KERNEL + kj) * cin
            dpad[..., ki : ki + stride * Ho : stride, kj : kj + stride * Wo : stride, :] += dcols[..., k : k + cin]
    return dpad[..., pt : pt + H, pl : pl + W, :], dweight, dbias


class DenseConvPlan:
    """A small convolution rewritten as one dense matrix product.

    For tiny feature maps the (H*W*Cin) x (Ho*Wo*Cout) Toeplitz matrix is
    cheaper to gather from the kernel than im2col patches are to build.
    ``forward_index`` maps each dense entry to a kernel entry (or to a zero
    slot at index ``n_weights``); ``backward_index`` lists, per kernel entry,
    the dense entries it feeds, padded with a sentinel pointing at a zero slot.
    """

    def __init__(self, H: int, W: int, cin: int, cout: int, stride: int):
        Ho, pt, _ = same_padding(H, stride)
        Wo, pl, _ = same_padding(W, stride)
        self.shape_in = (H, W, cin)
        self.shape_out = (Ho, Wo, cout)
        self.d_in = H * W * cin
        self.d_out = Ho * Wo * cout
        self.n_weights = cout * cin * KERNEL * KERNEL
        ho, wo, ki, kj = np.meshgrid(
            np.arange(Ho), np.arange(Wo), np.arange(KERNEL), np.arange(KERNEL), indexing="ij"
        )
        h = ho * stride + ki - pt
        w = wo * stride + kj - pl
        ok = (h >= 0) & (h < H) & (w >= 0) & (w < W)
        ho, wo, ki, kj, h, w = (a[ok] for a in (ho, wo, ki, kj, h, w))
        ci, co = np.meshgrid(np.arange(cin), np.arange(cout), indexing="ij")
        ci, co = ci.ravel(), co.ravel()
        dense = (((h * W + w) * cin)[:, None] + ci) * self.d_out + ((ho * Wo + wo) * cout)[:, None] + co
        kern = ((co * cin + ci) * KERNEL + ki[:, None]) * KERNEL + kj[:, None]
        dense, kern = dense.ravel(), kern.ravel()
        fwd = np.full(self.d_in * self.d_out, self.n_weights)
        fwd[dense] = kern
        self.forward_index = fwd
        order = np.argsort(kern, kind="stable")
        counts = np.bincount(kern, minlength=self.n_weights)
        width = int(counts.max())
        bwd = np.full((self.n_weights, width), self.d_in * self.d_out)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        rank = np.arange(len(kern)) - np.repeat(starts, counts)
        bwd[kern[order], rank] = dense[order]
        self.backward_index = bwd

    def matrix(self, weight: np.ndarray) -> np.ndarray:
        flat = weight.reshape(weight.shape[:-4] + (self.n_weights,))
        ext = np.concatenate([flat, np.zeros(flat.shape[:-1] + (1,))], axis=-1)
        return np.take(ext, self.forward_index, axis=-1).reshape(flat.shape[:-1] + (self.d_in, self.d_out))

    def kernel_grad(self, dmatrix: np.ndarray, weight_shape: tuple[int, ...]) -> np.ndarray:
        flat = dmatrix.reshape(dmatrix.shape[:-2] + (-1,))
        ext = np.concatenate([flat, np.zeros(flat.shape[:-1] + (1,))], axis=-1)
        return np.take(ext, self.backward_index, axis=-1).sum(axis=-1).reshape(weight_shape)


@functools.lru_cache(maxsize=None)
def dense_conv_plan(H: int, W: int, cin: int, cout: int, stride: int) -> DenseConvPlan:
    return DenseConvPlan(H, W, cin, cout, stride)


def _to_nhwc(x: np.ndarray) -> np.ndarray:
    return np.moveaxis(x, -3, -1)


def _to_nchw(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(x, -1, -3))


def conv2d(input: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int = 1) -> np.ndarray:
    """3x3 cross-correlation with SAME zero padding plus a per-channel bias.

    Layout is ``input[..., B, Cin, H, W]``, ``weight[..., Cout, Cin, 3, 3]``.
    """
    _check_conv(input, weight, bias, stride)
    return _to_nchw(conv2d_nhwc(_to_nhwc(input), weight, bias, stride)[0])


def conv2d_backward(
    upstream: np.ndarray, input: np.ndarray, weight: np.ndarray, stride: int = 1
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients ``(dInput, dWeight, dBias)`` of :func:`conv2d`."""
    _check_conv(input, weight, np.zeros(weight.shape[-4]), stride)
    H, W = input.shape[-2:]
    expected = input.shape[:-3] + (weight.shape[-4], same_padding(H, stride)[0], same_padding(W, stride)[0])
    if upstream.shape[-4:] != expected[-4:]:
        raise ShapeError(f"upstream shape {upstream.shape} does not match conv output {expected}")
    x = _to_nhwc(input)
    cols = _im2col_nhwc(x, stride)
    dx, dw, db = conv2d_nhwc_backward(_to_nhwc(upstream), x.shape, weight, stride, cols)
    return _to_nchw(dx), dw, db


def relu(input: np.ndarray) -> np.ndarray:
    return np.maximum(input, 0.0)


def relu_backward(upstream: np.ndarray, input: np.ndarray) -> np.ndarray:
    return upstream * (input > 0)


def spatial_mean(input: np.ndarray) -> np.ndarray:
    if input.ndim < 4:
        raise ShapeError(f"spatial_mean expects a 4-d input, got {input.shape}")
    return input.mean(axis=(-2, -1))


def spatial_mean_backward(upstream: np.ndarray, input_shape: tuple[int, ...]) -> np.ndarray:
    H, W = input_shape[-2:]
    return np.broadcast_to((upstream / (H * W))[..., None, None], input_shape).copy()


def linear(input: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if input.shape[-1] != weight.shape[-2] or weight.shape[-1] != bias.shape[-1]:
        raise ShapeError(
            f"linear shapes incompatible: input {input.shape}, weight {weight.shape}, bias {bias.shape}"
        )
    return input @ weight + bias[..., None, :]


def linear_backward(
    upstream: np.ndarray, input: np.ndarray, weight: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    dinput = upstream @ np.swapaxes(weight, -1, -2)
    dweight = np.swapaxes(input, -1, -2) @ upstream
    dbias = upstream.sum(axis=-2)
    while dweight.ndim > weight.ndim:
        dweight = dweight.sum(axis=0)
        dbias = dbias.sum(axis=0)
    return dinput, dweight, dbias


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean cross-entropy over the batch axis and its gradient w.r.t. the logits.

    With leading population axes the loss has those axes' shape.
    """
    labels = np.asarray(labels)
    K = logits.shape[-1]
    B = logits.shape[-2]
    if labels.shape[-1] != B:
        raise ShapeError(f"{labels.shape[-1]} labels for a batch of {B}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ShapeError(f"labels must lie in [0, {K}), got range [{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    onehot = np.zeros(np.broadcast_shapes(logits.shape, labels.shape + (K,)))
    np.put_along_axis(onehot, np.broadcast_to(labels, onehot.shape[:-1])[..., None], 1.0, axis=-1)
    loss = -(logp * onehot).sum(axis=-1).mean(axis=-1)
    dlogits = (np.exp(logp) - onehot) / B
    return loss, dlogits


def finite_diff_grad(
    objective: Callable[[np.ndarray], float], params: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar objective, one coordinate at a time."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(params, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(objective(x))
        flat[i] = orig - eps
        fm = float(objective(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError(f"objective returned a non-finite value at coordinate {i}")
        g[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """Norm-wise relative error ``||a - b|| / max(||a||, ||b||, floor)``."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)
