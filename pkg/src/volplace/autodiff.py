"""Reverse-mode automatic differentiation over float64 numpy arrays.

Each primitive returns a fresh Tensor and, while gradients are enabled,
records its parents and a closure that routes the output gradient back to
them. ``backward`` runs the closures in reverse topological order,
accumulates gradients by summation, and then severs the recorded graph so
a training step leaves no live references behind. ``Adam`` implements the
standard bias-corrected update.

Inputs are never mutated; every op allocates its output.
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    DetachedTensor,
    IoError,
    MissingFile,
    NonFiniteValue,
    NotScalarLoss,
    ParseError,
    ShapeMismatch,
)

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 array plus optional gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatch(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # small conveniences; all defer to the module-level primitives
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor],
          backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient g down to ``shape`` (reverses numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --------------------------------------------------------------------------
# Primitives
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _make(out_data, (a, b), backward)


def _elementwise_pair(a: Tensor, b: Tensor, op: str) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        if op == "add":
            out_data = a.data + b.data
        elif op == "sub":
            out_data = a.data - b.data
        elif op == "mul":
            out_data = a.data * b.data
        else:
            out_data = a.data / b.data
    except ValueError:
        raise ShapeMismatch(f"{op} {a.shape} vs {b.shape}") from None

    def backward(g):
        if op == "add":
            ga, gb = g, g
        elif op == "sub":
            ga, gb = g, -g
        elif op == "mul":
            ga, gb = g * b.data, g * a.data
        else:
            ga = g / b.data
            gb = -g * a.data / (b.data ** 2)
        if a.requires_grad:
            _accumulate(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(gb, b.shape))

    return _make(out_data, (a, b), backward)


def add(a, b) -> Tensor:
    return _elementwise_pair(a, b, "add")


def sub(a, b) -> Tensor:
    return _elementwise_pair(a, b, "sub")


def mul(a, b) -> Tensor:
    return _elementwise_pair(a, b, "mul")


def div(a, b) -> Tensor:
    return _elementwise_pair(a, b, "div")


def mul_scalar(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    out_data = a.data * c

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * c)

    return _make(out_data, (a,), backward)


def square(a) -> Tensor:
    a = as_tensor(a)
    out_data = a.data ** 2

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * 2.0 * a.data)

    return _make(out_data, (a,), backward)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * 0.5 / np.sqrt(a.data))

    return _make(out_data, (a,), backward)


def relu(a) -> Tensor:
    # subgradient at 0 is 0
    a = as_tensor(a)
    mask = a.data > 0
    out_data = np.where(mask, a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * mask)

    return _make(out_data, (a,), backward)


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    out_data = np.where(mask, a.data, slope * a.data)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * np.where(mask, 1.0, slope))

    return _make(out_data, (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeMismatch("concat of zero tensors")
    try:
        out_data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatch(
            f"concat axis={axis} shapes {[t.shape for t in tensors]}"
        ) from None
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(sl)])

    return _make(out_data, tensors, backward)


def layer_norm(a, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Pure normalization (x - mean) / sqrt(var + eps); affine terms, if
    any, are applied by the caller with mul/add."""
    a = as_tensor(a)
    mean = a.data.mean(axis=axis, keepdims=True)
    var = a.data.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out_data = (a.data - mean) * inv
    n = a.data.shape[axis]

    def backward(g):
        if a.requires_grad:
            g_mean = g.mean(axis=axis, keepdims=True)
            gy_mean = (g * out_data).mean(axis=axis, keepdims=True)
            _accumulate(a, inv * (g - g_mean - out_data * gy_mean))

    return _make(out_data, (a,), backward)


def softmax_over_segments(values: Tensor, segment_ids: np.ndarray,
                          num_segments: int) -> Tensor:
    """Softmax applied independently within each segment of a flat vector.

    ``segment_ids[i]`` names the segment of ``values[i]``; segments need
    not be contiguous. Per segment the outputs are positive and sum to 1.
    """
    values = as_tensor(values)
    ids = np.asarray(segment_ids, dtype=np.int64)
    if values.data.ndim != 1 or ids.shape != values.shape:
        raise ShapeMismatch(
            f"segmented softmax needs flat aligned inputs, got {values.shape} and {ids.shape}"
        )
    if ids.size and (ids.min() < 0 or ids.max() >= num_segments):
        raise ShapeMismatch("segment id out of range")
    seg_max = np.full(num_segments, -np.inf)
    np.maximum.at(seg_max, ids, values.data)
    shifted = np.exp(values.data - seg_max[ids])
    seg_sum = np.zeros(num_segments)
    np.add.at(seg_sum, ids, shifted)
    out_data = shifted / seg_sum[ids]

    def backward(g):
        if values.requires_grad:
            seg_dot = np.zeros(num_segments)
            np.add.at(seg_dot, ids, g * out_data)
            _accumulate(values, out_data * (g - seg_dot[ids]))

    return _make(out_data, (values,), backward)


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    if a.data.ndim != 2:
        raise ShapeMismatch(f"gather_rows on {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeMismatch("gather_rows index out of range")
    out_data = a.data[idx]

    def backward(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            np.add.at(acc, idx, g)
            _accumulate(a, acc)

    return _make(out_data, (a,), backward)


def scatter_add_rows(values: Tensor, index: np.ndarray, num_rows: int) -> Tensor:
    """Sum row i of ``values`` into output row ``index[i]``."""
    values = as_tensor(values)
    idx = np.asarray(index, dtype=np.int64)
    if values.data.ndim != 2 or idx.shape != (values.shape[0],):
        raise ShapeMismatch(
            f"scatter_add_rows values {values.shape} index {idx.shape}"
        )
    if idx.size and (idx.min() < 0 or idx.max() >= num_rows):
        raise ShapeMismatch("scatter_add_rows index out of range")
    out_data = np.zeros((num_rows, values.shape[1]))
    np.add.at(out_data, idx, values.data)

    def backward(g):
        if values.requires_grad:
            _accumulate(values, g[idx])

    return _make(out_data, (values,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    if int(np.prod(shape)) != a.size and -1 not in tuple(shape):
        raise ShapeMismatch(f"reshape {a.shape} -> {shape}")
    out_data = a.data.reshape(shape)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g.reshape(a.shape))

    return _make(out_data, (a,), backward)


def transpose2d(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeMismatch(f"transpose2d on {a.shape}")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g.T)

    return _make(a.data.T.copy(), (a,), backward)


def _reduce(a: Tensor, axis, keepdims: bool, kind: str) -> Tensor:
    a = as_tensor(a)
    if kind == "sum":
        out_data = a.data.sum(axis=axis, keepdims=keepdims)
    else:
        out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.shape[axis]

    def backward(g):
        if a.requires_grad:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            grad = np.broadcast_to(g, a.shape).copy()
            if kind == "mean":
                grad /= count
            _accumulate(a, grad)

    return _make(out_data, (a,), backward)


def sum_reduce(a, axis=None, keepdims: bool = False) -> Tensor:
    return _reduce(a, axis, keepdims, "sum")


def mean_reduce(a, axis=None, keepdims: bool = False) -> Tensor:
    return _reduce(a, axis, keepdims, "mean")


def max_reduce(a, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; the gradient flows to the first argmax only."""
    a = as_tensor(a)
    out_data = a.data.max(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        grad = np.zeros_like(a.data)
        if axis is None:
            flat_idx = int(np.argmax(a.data))
            grad.reshape(-1)[flat_idx] = np.asarray(g).reshape(())
        else:
            idx = np.argmax(a.data, axis=axis)
            gg = g if keepdims else np.expand_dims(g, axis)
            np.put_along_axis(grad, np.expand_dims(idx, axis),
                              np.asarray(gg, dtype=np.float64), axis=axis)
        _accumulate(a, grad)

    return _make(out_data, (a,), backward)


# --------------------------------------------------------------------------
# Backward pass
# --------------------------------------------------------------------------

def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Backprop from a scalar loss; returns {tensor: gradient} for every
    requires_grad tensor reachable from it.

    Also leaves each gradient on ``tensor.grad``. The recorded graph is
    severed afterward so intermediate tensors can be collected between
    training steps.
    """
    if loss.size != 1:
        raise NotScalarLoss(f"loss has shape {loss.shape}")
    if not loss.requires_grad:
        raise DetachedTensor("loss does not require grad (built under no_grad or from constants)")
    if not np.isfinite(loss.data).all():
        raise NonFiniteValue(f"loss is {float(loss.data.reshape(()))}")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    for t in topo:
        t.grad = None
    loss.grad = np.ones_like(loss.data)

    for t in reversed(topo):
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)

    grads: dict[Tensor, np.ndarray] = {}
    for t in topo:
        if t.requires_grad and t.grad is not None:
            grads[t] = t.grad
        t._parents = ()
        t._backward = None
    return grads


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState) -> dict[str, Tensor]:
    """One bias-corrected Adam update; returns fresh parameter tensors.

    Parameters missing from ``grads`` are treated as zero-gradient and
    still pass through the moment decay.
    """
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new_params: dict[str, Tensor] = {}
    for name in params:
        p = params[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"grad shape {g.shape} != param shape {p.data.shape} for {name!r}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g ** 2)
        state.m[name] = m
        state.v[name] = v
        m_hat = m / bc1
        v_hat = v / bc2
        new_data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_params[name] = Tensor(new_data, requires_grad=True)
    return new_params


class Adam:
    """Stateful wrapper over :func:`adam_step` for a named parameter dict."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self, params: dict[str, Tensor],
             grads: dict[str, np.ndarray]) -> dict[str, Tensor]:
        return adam_step(params, grads, self.state)


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

CHECKPOINT_SCHEMA_VERSION = 1


def save_checkpoint(params: dict[str, Tensor], path) -> None:
    """Serialize named parameters as JSON {name -> {shape, data}}."""
    payload = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "tensors": {
            name: {
                "shape": list(t.data.shape),
                "data": [float(x) for x in t.data.reshape(-1)],
            }
            for name, t in sorted(params.items())
        },
    }
    try:
        Path(path).write_text(json.dumps(payload), encoding="utf-8")
    except OSError as exc:
        raise IoError(str(exc)) from exc


def load_checkpoint(path) -> dict[str, Tensor]:
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(exc.lineno, exc.msg) from None
    if payload.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise ParseError(0, f"unsupported checkpoint version {payload.get('schema_version')!r}")
    params = {}
    for name, entry in payload["tensors"].items():
        arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        params[name] = Tensor(arr, requires_grad=True)
    return params
