"""Fully-connected ReLU classifier with hand-written reverse mode, Nesterov SGD,
the truncated cosine learning-rate schedule and an EMA copy of the weights."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numkit import as_matrix

CHECKPOINT_MAGIC = b"DPLMLP01"


@dataclass
class MlpParams:
    """Layer ``i`` maps ``d_in -> d_out`` via ``x @ weights[i] + biases[i]``.

    Hidden layers use ReLU; the last layer is linear and produces logits.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: weight {w.shape} does not match bias {b.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i}: input dim {w.shape[0]} does not chain")

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> "MlpParams":
        return MlpParams([np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases])

    def max_abs_diff(self, other: "MlpParams") -> float:
        _check_same_shape(self, other)
        return max(float(np.max(np.abs(a - b))) for a, b in zip(self.arrays(), other.arrays()))


def _check_same_shape(a: MlpParams, b: MlpParams) -> None:
    if [x.shape for x in a.arrays()] != [x.shape for x in b.arrays()]:
        raise ValueError("parameter shapes differ")


def init_mlp(dims, rng: np.random.Generator, output_scale: float = 1.0) -> MlpParams:
    """Gaussian weights with std ``1/sqrt(d_in)`` and zero biases.

    The output layer is multiplied by ``output_scale``; 0 makes the initial
    predictions exactly uniform. The generator is consumed identically for
    every scale.
    """
    dims = [int(d) for d in dims]
    if len(dims) < 2 or min(dims) < 1:
        raise ValueError(f"invalid layer dims {dims}")
    weights = [rng.standard_normal((d_in, d_out)) / math.sqrt(d_in) for d_in, d_out in zip(dims[:-1], dims[1:])]
    weights[-1] = weights[-1] * output_scale
    biases = [np.zeros(d) for d in dims[1:]]
    return MlpParams(weights, biases)


def forward_cache(params: MlpParams, x) -> tuple[np.ndarray, list[np.ndarray]]:
    """Logits plus the list of layer inputs (needed by :func:`backward`)."""
    h = as_matrix(x)
    if h.shape[1] != params.weights[0].shape[0]:
        raise ValueError(f"input has {h.shape[1]} features, network expects {params.weights[0].shape[0]}")
    inputs = []
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
    return h, inputs


def forward(params: MlpParams, x) -> np.ndarray:
    return forward_cache(params, x)[0]


def penultimate(params: MlpParams, x) -> np.ndarray:
    """Activations feeding the output layer (the network's embedding)."""
    return forward_cache(params, x)[1][-1]


def backward(params: MlpParams, x, grad_logits, cache: list[np.ndarray] | None = None) -> MlpParams:
    """Exact gradients of ``sum(grad_logits * forward(params, x))`` w.r.t. the parameters."""
    if cache is None:
        _, cache = forward_cache(params, x)
    g = as_matrix(grad_logits)
    n = cache[0].shape[0]
    if g.shape != (n, params.weights[-1].shape[1]):
        raise ValueError(f"upstream gradient shape {g.shape} does not match logits ({n}, {params.weights[-1].shape[1]})")
    gw = [None] * len(params.weights)
    gb = [None] * len(params.weights)
    for i in range(len(params.weights) - 1, -1, -1):
        a = cache[i]
        gw[i] = a.T @ g
        gb[i] = g.sum(axis=0)
        if i:
            # a = relu(pre); relu'(pre) = [a > 0]
            g = (g @ params.weights[i].T) * (a > 0)
    return MlpParams(gw, gb)


@dataclass
class OptimState:
    velocity: MlpParams
    momentum: float = 0.9
    weight_decay: float = 5e-4
    base_lr: float = 0.03

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0 or self.base_lr <= 0:
            raise ValueError("weight_decay must be >= 0 and base_lr > 0")

    @classmethod
    def for_params(cls, params: MlpParams, **kw) -> "OptimState":
        return cls(params.zeros_like(), **kw)

    def copy(self) -> "OptimState":
        return OptimState(self.velocity.copy(), self.momentum, self.weight_decay, self.base_lr)


def sgd_nesterov_step(params: MlpParams, grads: MlpParams, opt: OptimState, lr: float) -> MlpParams:
    """One Nesterov step, updating ``params`` and ``opt.velocity`` in place.

    ``v <- mu*v + g``; ``p <- p - lr*(g + mu*v)``; then weight matrices (not
    biases) shrink by ``lr*weight_decay*p`` (decoupled decay).
    """
    if lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    for g in grads.arrays():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("diverged: non-finite gradient")
    mu = opt.momentum
    layers = zip(params.weights, grads.weights, opt.velocity.weights)
    for p, g, v in layers:
        v *= mu
        v += g
        decay = lr * opt.weight_decay * p
        p -= lr * (g + mu * v)
        p -= decay
    for p, g, v in zip(params.biases, grads.biases, opt.velocity.biases):
        v *= mu
        v += g
        p -= lr * (g + mu * v)
    return params


def cosine_lr(step: int, total: int, base: float) -> float:
    """``base * cos(7*pi*step / (16*total))``; ends at about 0.195 * base."""
    if total <= 0:
        raise ValueError(f"total steps must be positive, got {total}")
    if step < 0 or step > total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return base * math.cos(7.0 * math.pi * step / (16.0 * total))


@dataclass
class EmaTeacher:
    shadow: MlpParams
    decay: float = 0.999

    def __post_init__(self):
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError(f"decay must lie in [0, 1], got {self.decay}")

    @classmethod
    def from_student(cls, student: MlpParams, decay: float = 0.999) -> "EmaTeacher":
        return cls(student.copy(), decay)

    def copy(self) -> "EmaTeacher":
        return EmaTeacher(self.shadow.copy(), self.decay)


def ema_update(teacher: EmaTeacher, student: MlpParams) -> EmaTeacher:
    _check_same_shape(teacher.shadow, student)
    d = teacher.decay
    for t, s in zip(teacher.shadow.arrays(), student.arrays()):
        t *= d
        t += (1.0 - d) * s
    return teacher


# checkpoint layout (little endian):
#   8 bytes magic | u32 n_layers | n_layers * (u32 d_in, u32 d_out)
#   then per layer: d_in*d_out f64 weights (row-major), d_out f64 biases


def save_checkpoint(params: MlpParams, path, meta: dict | None = None) -> None:
    path = Path(path)
    buf = [CHECKPOINT_MAGIC, struct.pack("<I", len(params.weights))]
    for w in params.weights:
        buf.append(struct.pack("<II", *w.shape))
    for w, b in zip(params.weights, params.biases):
        buf.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        buf.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    path.write_bytes(b"".join(buf))
    sidecar = {"format": "debiaspl-mlp", "version": 1, "dims": params.dims,
               "hidden_activation": "relu", "output": "linear-logits"}
    sidecar.update(meta or {})
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> MlpParams:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a debiaspl checkpoint")
    (n,) = struct.unpack_from("<I", raw, 8)
    shapes = [struct.unpack_from("<II", raw, 12 + 8 * i) for i in range(n)]
    off = 12 + 8 * n
    weights, biases = [], []
    for d_in, d_out in shapes:
        w = np.frombuffer(raw, dtype="<f8", count=d_in * d_out, offset=off).reshape(d_in, d_out)
        off += 8 * d_in * d_out
        b = np.frombuffer(raw, dtype="<f8", count=d_out, offset=off)
        off += 8 * d_out
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return MlpParams(weights, biases)
