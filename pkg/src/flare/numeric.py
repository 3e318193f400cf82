"""Dense numerical substrate: layer primitives with explicit backward passes,
losses, Adam, and parameter checkpoints.

Everything is float64. Vectors are 1-D arrays; any primitive that takes a
vector also accepts a 2-D array whose rows are independent samples, which is
how the model runs a whole batch through one call.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand dimensions do not line up."""


class ContractError(RuntimeError):
    """A precondition of an operation was violated by the caller."""


class CheckpointError(ValueError):
    pass


@dataclass
class ParamBlock:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    adam_m: np.ndarray = field(init=False)
    adam_v: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape


@dataclass(frozen=True)
class LossWeights:
    class_weights: tuple[float, float, float] = (1.0, 1.3, 2.0)
    alpha: float = 1.0

    def __post_init__(self):
        if len(self.class_weights) != 3:
            raise ValueError("class_weights must have 3 entries (CN, MCI, AD)")
        if any(not w > 0 for w in self.class_weights):
            raise ValueError(f"class weights must be positive, got {self.class_weights}")
        if not self.alpha >= 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")


def zero_grads(params: Iterable[ParamBlock]) -> None:
    for p in params:
        p.grad.fill(0.0)


# --------------------------------------------------------------------------
# Linear layer
# --------------------------------------------------------------------------

class LinearTrace(NamedTuple):
    x: np.ndarray
    W: np.ndarray


def linear_forward(x, W, b):
    """Return ``W @ x + b`` (row-wise when ``x`` is a batch)."""
    x = np.asarray(x, dtype=DTYPE)
    W = np.asarray(W, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if W.ndim != 2:
        raise ShapeError(f"W must be 2-D, got shape {W.shape}")
    if x.shape[-1] != W.shape[1]:
        raise ShapeError(f"x has {x.shape[-1]} features but W expects {W.shape[1]} (W shape {W.shape})")
    if b.shape != (W.shape[0],):
        raise ShapeError(f"b has shape {b.shape}, expected ({W.shape[0]},) to match W rows")
    return x @ W.T + b


def linear_backward(trace: LinearTrace | None, upstream):
    """Gradients of a linear layer given the upstream gradient of its output.

    For a batch, grad_W and grad_b are summed over rows.
    """
    if trace is None:
        raise ContractError("linear_backward called without a forward trace")
    g = np.asarray(upstream, dtype=DTYPE)
    x, W = trace.x, trace.W
    if g.shape[-1] != W.shape[0]:
        raise ShapeError(f"upstream has {g.shape[-1]} entries but layer has {W.shape[0]} outputs")
    if g.ndim == 1:
        grad_W = np.outer(g, x)
        grad_b = g.copy()
    else:
        grad_W = g.T @ x
        grad_b = g.sum(axis=0)
    grad_x = g @ W
    return grad_x, grad_W, grad_b


# --------------------------------------------------------------------------
# Activations
# --------------------------------------------------------------------------

ACTIVATIONS = ("relu", "tanh", "sigmoid", "identity")


def sigmoid(x):
    # split by sign so exp never overflows
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def activation(x, kind: str):
    x = np.asarray(x, dtype=DTYPE)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "identity":
        return x.copy()
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(x, kind: str, upstream, out=None):
    """Multiply ``upstream`` by the activation derivative at forward input ``x``.

    ``out`` is the forward output if the caller kept it (saves a recompute).
    """
    upstream = np.asarray(upstream, dtype=DTYPE)
    if kind == "relu":
        return upstream * (np.asarray(x) > 0)
    if kind == "tanh":
        y = np.tanh(x) if out is None else out
        return upstream * (1.0 - y * y)
    if kind == "sigmoid":
        y = sigmoid(x) if out is None else out
        return upstream * y * (1.0 - y)
    if kind == "identity":
        return upstream.copy()
    raise ValueError(f"unknown activation {kind!r}")


# --------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------

def softmax(logits):
    z = np.asarray(logits, dtype=DTYPE)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = np.asarray(logits, dtype=DTYPE)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def weighted_cross_entropy(logits, label, weights=(1.0, 1.0, 1.0)):
    """Class-weighted cross entropy and its gradient w.r.t. the logits.

    With a batch of logits, ``label`` is an integer array and the returned loss
    is the sum over rows.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    weights = np.asarray(weights, dtype=DTYPE)
    if logits.ndim == 1:
        w = weights[label]
        loss = -w * log_softmax(logits)[label]
        grad = softmax(logits)
        grad[label] -= 1.0
        return float(loss), w * grad
    label = np.asarray(label, dtype=np.intp)
    rows = np.arange(len(label))
    w = weights[label]
    loss = -(w * log_softmax(logits)[rows, label]).sum()
    grad = softmax(logits)
    grad[rows, label] -= 1.0
    return float(loss), grad * w[:, None]


def mse(pred, target):
    """Mean squared error over a vector's components.

    For 2-D input each row is averaged on its own and the row losses are summed.
    """
    pred = np.asarray(pred, dtype=DTYPE)
    target = np.asarray(target, dtype=DTYPE)
    if pred.shape != target.shape:
        raise ShapeError(f"pred shape {pred.shape} != target shape {target.shape}")
    d = pred.shape[-1]
    diff = pred - target
    return float((diff * diff).sum() / d), 2.0 * diff / d


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Iterable[ParamBlock], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, t: int = 1) -> None:
    """One bias-corrected Adam update, in place. Gradients are left untouched."""
    if t < 1:
        raise ContractError(f"Adam step count must be >= 1, got {t}")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p in params:
        g = p.grad
        p.adam_m *= beta1
        p.adam_m += (1.0 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1.0 - beta2) * (g * g)
        m_hat = p.adam_m / c1
        v_hat = p.adam_v / c2
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

_MAGIC = b"FLRCKPT1"


def _header(params: list[ParamBlock], step: int, meta: dict) -> dict:
    return {
        "step": int(step),
        "meta": meta,
        "blocks": [{"name": p.name, "shape": list(p.shape)} for p in params],
    }


def save_checkpoint(path, params: list[ParamBlock], step: int = 0, meta: dict | None = None, fmt: str = "binary") -> None:
    """Write parameter values plus Adam state.

    Binary layout: magic, u64 header length, UTF-8 JSON header, then for each
    block its value, adam_m and adam_v as little-endian float64, row-major.
    Nothing time-dependent is written, so identical state gives identical bytes.
    """
    meta = meta or {}
    header = _header(params, step, meta)
    if fmt == "json":
        header["blocks"] = [
            {
                "name": p.name,
                "shape": list(p.shape),
                "value": p.value.ravel().tolist(),
                "adam_m": p.adam_m.ravel().tolist(),
                "adam_v": p.adam_v.ravel().tolist(),
            }
            for p in params
        ]
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(header, fh, sort_keys=True)
        return
    if fmt != "binary":
        raise ValueError(f"unknown checkpoint format {fmt!r}")
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for p in params:
            for arr in (p.value, p.adam_m, p.adam_v):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_checkpoint(path) -> tuple[dict, dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]]]:
    """Return ``(header, {name: (value, adam_m, adam_v)})`` from either format."""
    with open(path, "rb") as fh:
        raw = fh.read()
    arrays = {}
    if raw.startswith(_MAGIC):
        (n,) = struct.unpack_from("<Q", raw, len(_MAGIC))
        off = len(_MAGIC) + 8
        header = json.loads(raw[off:off + n].decode("utf-8"))
        off += n
        for blk in header["blocks"]:
            shape = tuple(blk["shape"])
            size = int(np.prod(shape)) if shape else 1
            parts = []
            for _ in range(3):
                arr = np.frombuffer(raw, dtype="<f8", count=size, offset=off).astype(DTYPE).reshape(shape)
                off += 8 * size
                parts.append(arr)
            arrays[blk["name"]] = tuple(parts)
        if off != len(raw):
            raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
        return header, arrays
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: not a checkpoint file") from exc
    for blk in header["blocks"]:
        shape = tuple(blk["shape"])
        arrays[blk["name"]] = tuple(
            np.asarray(blk[k], dtype=DTYPE).reshape(shape) for k in ("value", "adam_m", "adam_v")
        )
    return header, arrays


def load_into(params: list[ParamBlock], arrays: dict) -> None:
    """Copy checkpoint arrays into existing blocks with strict name/shape checks."""
    names = {p.name for p in params}
    if names != set(arrays):
        missing = sorted(names - set(arrays))
        extra = sorted(set(arrays) - names)
        raise ShapeError(f"checkpoint blocks do not match model: missing={missing} unexpected={extra}")
    for p in params:
        value, m, v = arrays[p.name]
        if value.shape != p.shape:
            raise ShapeError(f"block {p.name}: checkpoint shape {value.shape} != model shape {p.shape}")
        p.value[...] = value
        p.adam_m[...] = m
        p.adam_v[...] = v
