"""Per-parameter learned update rule.

Every inner parameter gets a 16-wide feature row built from its gradient,
five momentum accumulators, its value and a few time/tensor descriptors. A
shared 16-32-2 MLP maps each row to a direction ``a`` and log step ``b`` and
the step taken is ``0.001 * a * exp(0.001 * b)``.

All functions accept inner tensors with one optional leading population axis
(a stack of independent unrolls). The population axis of ``theta`` must match.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict

import numpy as np

from .model import InnerParams

MOMENTUM_DECAYS = np.array([0.5, 0.9, 0.99, 0.999, 0.9999])
TIME_SCALES = np.array([2.0, 10.0, 20.0, 100.0, 200.0, 1000.0])
N_FEATURES = 16
HIDDEN = 32
N_OUTPUTS = 2
STEP_SCALE = 0.001
EPS_LOG = 1e-8
EPS_NORM = 1e-6

LearnedOptParams = Dict[str, np.ndarray]

THETA_SHAPES = {
    "w1": (N_FEATURES, HIDDEN),
    "b1": (HIDDEN,),
    "w2": (HIDDEN, N_OUTPUTS),
    "b2": (N_OUTPUTS,),
}
N_THETA = sum(int(np.prod(s)) for s in THETA_SHAPES.values())

_CANONICAL_NDIM = {"fc_w": 2}


def lead_ndim(name: str, value: np.ndarray) -> int:
    """Number of population axes in front of an inner tensor."""
    if name in _CANONICAL_NDIM:
        base = _CANONICAL_NDIM[name]
    elif name.endswith("_b"):
        base = 1
    else:
        base = 4
    lead = value.ndim - base
    if lead not in (0, 1):
        raise ValueError(f"tensor {name!r} has unexpected shape {value.shape}")
    return lead


@dataclass
class LearnedOptState:
    """Momentum accumulators and step counter.

    Each accumulator has the shape of its tensor with a timescale axis of 5
    inserted after the population axis (if any): ``(P, 5, *shape)``.

    ``t`` is an int for a single unroll or an int array for a population.
    """

    momenta: InnerParams
    t: np.ndarray | int = 0

    def copy(self) -> "LearnedOptState":
        return LearnedOptState({k: v.copy() for k, v in self.momenta.items()}, np.copy(self.t))


def init_state(params: InnerParams) -> LearnedOptState:
    momenta = {}
    for k, v in params.items():
        lead = lead_ndim(k, v)
        momenta[k] = np.zeros(v.shape[:lead] + (len(MOMENTUM_DECAYS),) + v.shape[lead:])
    first = next(iter(params.items()))
    t = 0 if lead_ndim(*first) == 0 else np.zeros(first[1].shape[0], dtype=np.int64)
    return LearnedOptState(momenta, t)


def update_momenta(state: LearnedOptState, grads: InnerParams) -> LearnedOptState:
    """``m_i <- beta_i m_i + (1 - beta_i) g`` for each timescale; ``t <- t + 1``."""
    momenta = {}
    for name, g in grads.items():
        m = state.momenta[name]
        lead = lead_ndim(name, g)
        if m.shape[:lead] + m.shape[lead + 1 :] != g.shape:
            raise ValueError(f"gradient {name!r} shape {g.shape} does not match state {m.shape}")
        decay = MOMENTUM_DECAYS.reshape((-1,) + (1,) * (g.ndim - lead))
        new = m * decay
        for i, beta in enumerate(MOMENTUM_DECAYS):
            new[(slice(None),) * lead + (i,)] += (1.0 - beta) * g
        momenta[name] = new
    return LearnedOptState(momenta, state.t + 1)


def time_features(t) -> np.ndarray:
    """``sin(s * t / pi)`` for each time scale; shape ``(..., 6)``."""
    t = np.asarray(t, dtype=np.float64)
    return np.sin(t[..., None] * TIME_SCALES / np.pi)


def _fill_tensor_features(
    out: np.ndarray, name: str, g: np.ndarray, momenta: np.ndarray, w: np.ndarray, time_feats: np.ndarray
) -> None:
    # out is feature-major: (*lead, 16, n)
    lead = lead_ndim(name, w)
    lshape = w.shape[:lead]
    n = out.shape[-1]
    wf = w.reshape(lshape + (n,))
    out[..., 0, :] = g.reshape(lshape + (n,))
    out[..., 1:6, :] = momenta.reshape(lshape + (len(MOMENTUM_DECAYS), n))
    out[..., 6, :] = wf
    np.abs(wf, out=out[..., 7, :])
    out[..., 7, :] += EPS_LOG
    np.log(out[..., 7, :], out=out[..., 7, :])
    raw = out[..., :8, :]
    rms = np.sqrt(np.einsum("...fn,...fn->...f", raw, raw) / n)
    raw /= (rms + EPS_NORM)[..., None]
    out[..., 8:14, :] = time_feats[..., None]
    norm = np.sqrt(np.einsum("...n,...n->...", wf, wf))
    out[..., 14, :] = np.log(norm + EPS_LOG)[..., None]
    out[..., 15, :] = np.log(n)


def tensor_features(name: str, g: np.ndarray, momenta: np.ndarray, w: np.ndarray, t) -> np.ndarray:
    """Feature rows ``(*lead, n, 16)`` for every entry of one tensor."""
    lead = lead_ndim(name, w)
    n = int(np.prod(w.shape[lead:]))
    out = np.empty(w.shape[:lead] + (N_FEATURES, n))
    _fill_tensor_features(out, name, g, momenta, w, time_features(t))
    return np.swapaxes(out, -1, -2)


def _feature_buffer(state: LearnedOptState, grads: InnerParams, params: InnerParams) -> np.ndarray:
    # feature-major (*lead, 17, N); row 16 is all ones so the MLP bias folds into its matmul
    sizes = []
    for name, w in params.items():
        lead = lead_ndim(name, w)
        sizes.append(int(np.prod(w.shape[lead:])))
    out = np.empty(w.shape[:lead] + (N_FEATURES + 1, sum(sizes)))
    out[..., N_FEATURES, :] = 1.0
    tf = time_features(state.t)
    i = 0
    for (name, w), n in zip(params.items(), sizes):
        _fill_tensor_features(out[..., :N_FEATURES, i : i + n], name, grads[name], state.momenta[name], w, tf)
        i += n
    return out


def compute_features(state: LearnedOptState, grads: InnerParams, params: InnerParams) -> np.ndarray:
    """Stacked feature rows ``(*lead, N, 16)`` for every inner parameter.

    Tensors appear in ``params`` order. Columns: normalized
    ``[g, m1..m5, w, log|w|]``, six time features, log tensor norm, log tensor
    size. Expects ``state`` already updated with ``grads``. The result is a
    transposed view of a feature-major buffer.
    """
    return np.swapaxes(_feature_buffer(state, grads, params)[..., :N_FEATURES, :], -1, -2)


def _mlp_outputs(theta: LearnedOptParams, faug: np.ndarray) -> np.ndarray:
    """``(*lead, 2, N)`` network outputs from an augmented feature-major buffer."""
    lead = np.broadcast_shapes(faug.shape[:-2], theta["w1"].shape[:-2])
    n = faug.shape[-1]
    fm = np.broadcast_to(faug, lead + faug.shape[-2:]).reshape((-1,) + faug.shape[-2:])
    w1 = np.concatenate([theta["w1"], theta["b1"][..., None, :]], axis=-2)
    w1t = np.broadcast_to(np.swapaxes(w1, -1, -2), lead + (HIDDEN, N_FEATURES + 1)).reshape(-1, HIDDEN, N_FEATURES + 1)
    w2t = np.broadcast_to(np.swapaxes(theta["w2"], -1, -2), lead + (N_OUTPUTS, HIDDEN)).reshape(-1, N_OUTPUTS, HIDDEN)
    b2 = np.broadcast_to(theta["b2"], lead + (N_OUTPUTS,)).reshape(-1, N_OUTPUTS, 1)
    out = np.empty((len(fm), N_OUTPUTS, n))
    with np.errstate(all="ignore"):
        # member by member and in column chunks so the hidden layer stays in cache
        for p in range(len(fm)):
            w1p = np.ascontiguousarray(w1t[p])
            w2p = np.ascontiguousarray(w2t[p])
            for s in range(0, n, _CHUNK):
                hidden = w1p @ fm[p, :, s : s + _CHUNK]
                np.maximum(hidden, 0.0, out=hidden)
                np.matmul(w2p, hidden, out=out[p, :, s : s + _CHUNK])
            out[p] += b2[p]
    return out.reshape(lead + (N_OUTPUTS, n))


def _step_from_outputs(out: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    a, b = out[..., 0, :], out[..., 1, :]
    with np.errstate(all="ignore"):
        delta = STEP_SCALE * a * np.exp(STEP_SCALE * b)
    return a, b, delta


def learned_step(theta: LearnedOptParams, features: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(a, b, delta)`` with ``delta = 0.001 * a * exp(0.001 * b)`` per row."""
    if features.shape[-1] != N_FEATURES:
        raise ValueError(f"feature rows must have length {N_FEATURES}, got {features.shape[-1]}")
    faug = np.empty(features.shape[:-2] + (N_FEATURES + 1, features.shape[-2]))
    faug[..., :N_FEATURES, :] = np.swapaxes(features, -1, -2)
    faug[..., N_FEATURES, :] = 1.0
    return _step_from_outputs(_mlp_outputs(theta, faug))


_CHUNK = 512


def apply_update(w: np.ndarray, delta: np.ndarray) -> np.ndarray:
    return w - delta


def split_rows(flat: np.ndarray, params: InnerParams) -> InnerParams:
    """Inverse of the row stacking in :func:`compute_features`."""
    out, i = {}, 0
    for name, w in params.items():
        lead = lead_ndim(name, w)
        n = int(np.prod(w.shape[lead:]))
        out[name] = flat[..., i : i + n].reshape(w.shape)
        i += n
    return out


def step(
    theta: LearnedOptParams, state: LearnedOptState, params: InnerParams, grads: InnerParams
) -> tuple[InnerParams, LearnedOptState, np.ndarray]:
    """One full learned update. Returns new params, new state, and the flat step."""
    state = update_momenta(state, grads)
    _, _, delta = _step_from_outputs(_mlp_outputs(theta, _feature_buffer(state, grads, params)))
    deltas = split_rows(delta, params)
    new = {k: apply_update(w, deltas[k]) for k, w in params.items()}
    return new, state, delta


def init_learned_opt(rng: np.random.Generator) -> LearnedOptParams:
    """He-normal hidden layer, zero hidden bias, output layer at std 1e-3."""
    return {
        "w1": rng.standard_normal(THETA_SHAPES["w1"]) * np.sqrt(2.0 / N_FEATURES),
        "b1": np.zeros(HIDDEN),
        "w2": rng.standard_normal(THETA_SHAPES["w2"]) * 1e-3,
        "b2": rng.standard_normal(THETA_SHAPES["b2"]) * 1e-3,
    }


def theta_to_vector(theta: LearnedOptParams) -> np.ndarray:
    return np.concatenate([np.asarray(theta[k]).ravel() for k in THETA_SHAPES])


def theta_from_vector(vector: np.ndarray) -> LearnedOptParams:
    """Accepts ``(610,)`` or ``(P, 610)``; the latter yields a population."""
    vector = np.asarray(vector, dtype=np.float64)
    if vector.shape[-1] != N_THETA:
        raise ValueError(f"expected {N_THETA} values, got {vector.shape[-1]}")
    lead = vector.shape[:-1]
    out, i = {}, 0
    for k, shape in THETA_SHAPES.items():
        n = int(np.prod(shape))
        out[k] = vector[..., i : i + n].reshape(lead + shape)
        i += n
    return out


# -- checkpoint format --------------------------------------------------------

MAGIC = b"MOPT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


def save_checkpoint(theta: LearnedOptParams, path: str | Path) -> Path:
    """Write the flat binary checkpoint plus a ``.txt`` sidecar with dims and sha256."""
    path = Path(path)
    payload = _HEADER.pack(MAGIC, FORMAT_VERSION, N_FEATURES, HIDDEN, N_OUTPUTS)
    payload += theta_to_vector(theta).astype("<f8").tobytes()
    path.write_bytes(payload)
    digest = hashlib.sha256(payload).hexdigest()
    sidecar = path.with_name(path.name + ".txt")
    sidecar.write_text(
        f"format = metaopt-theta\nversion = {FORMAT_VERSION}\n"
        f"dims = {N_FEATURES} {HIDDEN} {N_OUTPUTS}\nn_values = {N_THETA}\nsha256 = {digest}\n"
    )
    return path


def load_checkpoint(path: str | Path) -> LearnedOptParams:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: file too short for a checkpoint header")
    magic, version, d_in, d_hidden, d_out = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    if (d_in, d_hidden, d_out) != (N_FEATURES, HIDDEN, N_OUTPUTS):
        raise ValueError(f"{path}: layer dims {(d_in, d_hidden, d_out)} do not match this build")
    body = data[_HEADER.size :]
    if len(body) != 8 * N_THETA:
        raise ValueError(f"{path}: expected {8 * N_THETA} payload bytes, found {len(body)}")
    return theta_from_vector(np.frombuffer(body, dtype="<f8").copy())
