"""Neural primitives with explicit forward and backward passes.

Everything runs in float64 numpy. There is no autodiff graph: composite
models call the *_backward functions by hand, in reverse order of their
forward passes, and are responsible for summing gradients where a value
fans out. Each forward returns exactly the cache its backward needs,
usually just its own inputs or output.

Checkpoints are an ordered list of named float64 tensors in one binary
blob, little endian, described by a JSON manifest sitting next to it.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, VersionError

CHECKPOINT_MAGIC = "SOZCKPT"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# parameters and init

@dataclass
class Param:
    """A trainable tensor plus its gradient accumulator."""

    data: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def dense_param(rng: np.random.Generator, fan_in: int, fan_out: int) -> tuple[Param, Param]:
    """Weight with Glorot uniform init, bias at zero."""
    return Param(glorot_uniform(rng, fan_in, fan_out)), Param(np.zeros(fan_out))


# ---------------------------------------------------------------------------
# elementary ops

def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return x @ w + b


def dense_backward(x: np.ndarray, w: np.ndarray, dy: np.ndarray):
    dx = dy @ w.T
    dw = x.T @ dy
    db = dy.sum(axis=0) if dy.ndim > 1 else dy.copy()
    return dx, dw, db


def tanh_forward(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def tanh_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    # y is the forward output, so the Jacobian is diag(1 - y^2)
    return dy * (1.0 - y * y)


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * (x > 0.0)


def avgpool1d(x: np.ndarray, window: int = 2, stride: int = 2) -> np.ndarray:
    """Mean pooling over the last axis. Only window == stride is supported
    and the axis length must be divisible by the window."""
    if window != stride:
        raise ValueError("avgpool1d supports window == stride only")
    n = x.shape[-1]
    if n % window:
        raise ValueError(f"axis length {n} not divisible by window {window}")
    return x.reshape(*x.shape[:-1], n // window, window).mean(axis=-1)


def avgpool1d_backward(dy: np.ndarray, window: int = 2) -> np.ndarray:
    # each input in a window receives dy / window
    return np.repeat(dy / window, window, axis=-1)


def unpool1d(x: np.ndarray, factor: int = 2) -> np.ndarray:
    """Repeat each entry of the last axis `factor` times."""
    return np.repeat(x, factor, axis=-1)


def unpool1d_backward(dy: np.ndarray, factor: int = 2) -> np.ndarray:
    n = dy.shape[-1]
    if n % factor:
        raise ValueError(f"gradient length {n} not divisible by factor {factor}")
    return dy.reshape(*dy.shape[:-1], n // factor, factor).sum(axis=-1)


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a * b


def hadamard_backward(a: np.ndarray, b: np.ndarray, dy: np.ndarray):
    return dy * b, dy * a


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction for overflow safety."""
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs: np.ndarray, labels: np.ndarray,
                  class_weights: np.ndarray | None = None):
    """Mean negative log likelihood over rows, plus the gradient with
    respect to the logits that produced `probs` via softmax_rows.

    With class weights w, the loss is the w-weighted mean of the per-row
    terms (normalized by the total weight) and the gradient is weighted
    to match, so it stays the exact derivative of the returned loss.
    """
    n = probs.shape[0]
    idx = np.arange(n)
    picked = np.maximum(probs[idx, labels], 1e-300)
    if class_weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(class_weights, dtype=np.float64)[labels]
    wsum = w.sum()
    loss = float((w * -np.log(picked)).sum() / wsum)
    dlogits = probs.copy()
    dlogits[idx, labels] -= 1.0
    dlogits *= (w / wsum)[:, None]
    return loss, dlogits


def mse(x: np.ndarray, y: np.ndarray):
    """Per-sample mean squared error, averaged over rows for 2-d input.

    Returns (loss, dloss/dx). For a length-I vector this is ||x - y||^2 / I.
    """
    diff = x - y
    denom = diff.size
    loss = float((diff * diff).sum() / denom)
    return loss, 2.0 * diff / denom


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def for_shape(cls, shape) -> "AdamState":
        return cls(m=np.zeros(shape), v=np.zeros(shape))


def adam_step(value: np.ndarray, grad: np.ndarray, state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place on `value`."""
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    mhat = state.m / (1.0 - beta1 ** state.t)
    vhat = state.v / (1.0 - beta2 ** state.t)
    value -= lr * mhat / (np.sqrt(vhat) + eps)


class Adam:
    """Adam over a list of Params. Step order is the list order, fixed."""

    def __init__(self, params: list[Param], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.states = [AdamState.for_shape(p.data.shape) for p in params]

    def step(self) -> None:
        for p, s in zip(self.params, self.states):
            adam_step(p.data, p.grad, s, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(f, x: np.ndarray, analytic: np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between central differences of scalar f and the
    analytic gradient. The denominator is max(1, |analytic|) per coordinate,
    so tiny gradients are compared absolutely."""
    x = np.asarray(x, dtype=np.float64)
    worst = 0.0
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        fp = f(x)
        x[idx] = orig - h
        fm = f(x)
        x[idx] = orig
        num = (fp - fm) / (2.0 * h)
        err = abs(num - analytic[idx]) / max(1.0, abs(analytic[idx]))
        if err > worst:
            worst = err
    return worst


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path: str, tensors: list[tuple[str, np.ndarray, str]],
                    meta: dict | None = None) -> None:
    """Write named tensors to `path` (raw little-endian float64, C order,
    concatenated) and a manifest to `path + '.json'`.

    Each entry of `tensors` is (name, array, role) where role is a short
    tag like 'encoder.dense.0.weight' used by loaders and by humans.
    """
    manifest = {
        "format": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "tensors": [],
    }
    offset = 0
    with open(path, "wb") as fh:
        for name, arr, role in tensors:
            arr = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(arr.tobytes())
            manifest["tensors"].append({
                "name": name,
                "role": role,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": arr.nbytes,
            })
            offset += arr.nbytes
    with open(path + ".json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_checkpoint(path: str):
    """Returns (ordered dict name -> float64 array, meta dict)."""
    man_path = path + ".json"
    if not os.path.exists(man_path):
        raise FormatError(f"missing checkpoint manifest {man_path}")
    with open(man_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != CHECKPOINT_MAGIC:
        raise FormatError(f"{man_path}: not a checkpoint manifest")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise VersionError(
            f"{man_path}: version {manifest.get('version')} unsupported "
            f"(expected {CHECKPOINT_VERSION})")
    blob_size = os.path.getsize(path)
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        for entry in manifest["tensors"]:
            end = entry["offset"] + entry["nbytes"]
            if end > blob_size:
                raise FormatError(
                    f"{path}: tensor {entry['name']} ends at byte {end} "
                    f"but file has {blob_size} bytes")
            fh.seek(entry["offset"])
            raw = fh.read(entry["nbytes"])
            arr = np.frombuffer(raw, dtype="<f8").reshape(entry["shape"])
            out[entry["name"]] = arr.astype(np.float64)
    return out, manifest["meta"]
