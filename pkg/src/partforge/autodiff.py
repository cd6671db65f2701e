"""Dense float64 tensors with taped reverse-mode differentiation.

Everything is numpy-backed and double precision. A :class:`Tape` records
operations in execution order; :func:`backward` replays it in reverse to
accumulate gradients into leaf tensors. Ops executed with no active tape
compute values only, which is the inference path.

Supported broadcasting is deliberately narrow: elementwise ops take equal
shapes (or a python scalar constant), and ``add`` additionally accepts a
matrix plus a row vector for bias terms.
"""

from __future__ import annotations

import struct
import json
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "AutodiffError",
    "GradientOverflowError",
    "backward",
    "ops_forward",
    "adam_step",
    "AdamState",
    "save_named_tensors",
    "load_named_tensors",
    "matmul",
    "add",
    "mul",
    "div",
    "max_over_axis",
    "relu",
    "tanh",
    "exp",
    "log",
    "softmax",
    "tsum",
    "tmean",
    "concat",
    "index_select",
    "square",
    "sqrt",
    "reshape",
    "affine",
]


class AutodiffError(ValueError):
    """Shape or usage error in a tensor op."""


class GradientOverflowError(FloatingPointError):
    """A non-finite gradient reached the optimizer."""


_ACTIVE_TAPE: list["Tape"] = []


class Tape:
    """Records ops in execution order (a topological order of the graph)."""

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.pop()


def _current_tape() -> Tape | None:
    return _ACTIVE_TAPE[-1] if _ACTIVE_TAPE else None


class Tensor:
    """A dense float64 array plus an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # Operator sugar; RHS python scalars are treated as constants.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, parents: tuple[Tensor, ...], bw: Callable[[np.ndarray], None]) -> Tensor:
    tape = _current_tape()
    if tape is not None and any(p.requires_grad or p._parents for p in parents):
        out._parents = parents
        out._backward = bw
        tape.nodes.append(out)
    return out


def _unbroadcast_bias(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Reduce a (n, m) grad back to a (m,) bias.
    if g.shape == shape:
        return g
    return g.sum(axis=tuple(range(g.ndim - len(shape))))


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise AutodiffError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)

    def bw(g: np.ndarray) -> None:
        if a.requires_grad or a._parents:
            a.accumulate(g @ b.data.T)
        if b.requires_grad or b._parents:
            b.accumulate(a.data.T @ g)

    return _record(out, (a, b), bw)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused x @ w + bias row vector; one stored activation per layer."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise AutodiffError(f"affine: incompatible shapes {x.shape}, {w.shape}, {b.shape}")
    out = Tensor(x.data @ w.data + b.data)

    def bw(g: np.ndarray) -> None:
        if x.requires_grad or x._parents:
            x.accumulate(g @ w.data.T)
        if w.requires_grad or w._parents:
            w.accumulate(x.data.T @ g)
        if b.requires_grad or b._parents:
            b.accumulate(g.sum(axis=0))

    return _record(out, (x, w, b), bw)


def _elementwise_pair(op: str, a, b):
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        return a, None, float(b)
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise AutodiffError(f"{op}: incompatible shapes {a.shape} and {b.shape}")
    return a, b, None


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        out = Tensor(a.data + float(b))

        def bw(g: np.ndarray) -> None:
            a.accumulate(g)

        return _record(out, (a,), bw)
    b = _as_tensor(b)
    bias = a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]
    if a.shape != b.shape and not bias:
        raise AutodiffError(f"add: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data + b.data)

    def bw(g: np.ndarray) -> None:
        if a.requires_grad or a._parents:
            a.accumulate(g)
        if b.requires_grad or b._parents:
            b.accumulate(_unbroadcast_bias(g, b.shape))

    return _record(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b, const = _elementwise_pair("mul", a, b)
    if b is None:
        out = Tensor(a.data * const)

        def bw(g: np.ndarray) -> None:
            a.accumulate(g * const)

        return _record(out, (a,), bw)
    out = Tensor(a.data * b.data)

    def bw(g: np.ndarray) -> None:
        if a.requires_grad or a._parents:
            a.accumulate(g * b.data)
        if b.requires_grad or b._parents:
            b.accumulate(g * a.data)

    return _record(out, (a, b), bw)


def div(a, b) -> Tensor:
    a, b, const = _elementwise_pair("div", a, b)
    if b is None:
        return mul(a, 1.0 / const)
    out = Tensor(a.data / b.data)

    def bw(g: np.ndarray) -> None:
        if a.requires_grad or a._parents:
            a.accumulate(g / b.data)
        if b.requires_grad or b._parents:
            b.accumulate(-g * out.data / b.data)

    return _record(out, (a, b), bw)


def max_over_axis(x: Tensor, axis: int) -> Tensor:
    """Max reduction; gradient routes to the argmax (ties: lowest index)."""
    x = _as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise AutodiffError(f"max_over_axis: axis {axis} out of range for shape {x.shape}")
    axis = axis % x.ndim
    idx = np.argmax(x.data, axis=axis)
    out = Tensor(np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis))

    def bw(g: np.ndarray) -> None:
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        x.accumulate(gx)

    return _record(out, (x,), bw)


def _unary(x, f, dfdx) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(f(x.data))

    def bw(g: np.ndarray) -> None:
        x.accumulate(g * dfdx(x.data, out.data))

    return _record(out, (x,), bw)


def relu(x) -> Tensor:
    # Subgradient at exactly 0 is 0.
    return _unary(x, lambda v: np.maximum(v, 0.0), lambda v, o: (v > 0.0).astype(np.float64))


def tanh(x) -> Tensor:
    return _unary(x, np.tanh, lambda v, o: 1.0 - o * o)


def exp(x) -> Tensor:
    return _unary(x, np.exp, lambda v, o: o)


def log(x) -> Tensor:
    return _unary(x, np.log, lambda v, o: 1.0 / v)


def square(x) -> Tensor:
    return _unary(x, np.square, lambda v, o: 2.0 * v)


def sqrt(x) -> Tensor:
    return _unary(x, np.sqrt, lambda v, o: 0.5 / o)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bw(g: np.ndarray) -> None:
        dot = (g * y).sum(axis=axis, keepdims=True)
        x.accumulate(y * (g - dot))

    return _record(out, (x,), bw)


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.sum(axis=axis))

    def bw(g: np.ndarray) -> None:
        if axis is None:
            x.accumulate(np.full_like(x.data, float(g)))
        else:
            x.accumulate(np.broadcast_to(np.expand_dims(g, axis), x.shape))

    return _record(out, (x,), bw)


def tmean(x: Tensor, axis: int | None = None) -> Tensor:
    x = _as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis=axis), 1.0 / n)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise AutodiffError("concat: empty input list")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g: np.ndarray) -> None:
        for p, gp in zip(parts, np.split(g, splits, axis=axis)):
            if p.requires_grad or p._parents:
                p.accumulate(gp)

    return _record(out, tuple(parts), bw)


def index_select(x: Tensor, axis: int, indices) -> Tensor:
    x = _as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise AutodiffError(f"index_select: indices must be 1-d, got shape {idx.shape}")
    out = Tensor(np.take(x.data, idx, axis=axis))

    def bw(g: np.ndarray) -> None:
        gx = np.zeros_like(x.data)
        np.add.at(gx, tuple(idx if d == axis % x.ndim else slice(None) for d in range(x.ndim)), g)
        x.accumulate(gx)

    return _record(out, (x,), bw)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.reshape(shape))

    def bw(g: np.ndarray) -> None:
        x.accumulate(g.reshape(x.shape))

    return _record(out, (x,), bw)


_OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "div": div,
    "max_over_axis": max_over_axis,
    "relu": relu,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "softmax": softmax,
    "sum": tsum,
    "mean": tmean,
    "concat": concat,
    "index_select": index_select,
    "square": square,
    "sqrt": sqrt,
    "reshape": reshape,
    "affine": affine,
}


def ops_forward(op: str, *inputs, **kwargs) -> Tensor:
    """Dispatch an op by name. Unknown names raise AutodiffError."""
    try:
        fn = _OPS[op]
    except KeyError:
        raise AutodiffError(f"unknown op {op!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# backward + optimizer


def backward(tape: Tape, loss: Tensor, leaves: Iterable[Tensor] | None = None) -> dict[str, np.ndarray]:
    """Reverse sweep over the tape; returns gradients for named leaves.

    Leaves that do not influence the loss get exact zeros.
    """
    if loss.size != 1:
        raise AutodiffError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._backward is None and loss._parents == () and loss not in tape.nodes:
        raise AutodiffError("backward: loss is not on the tape")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node.grad is None or node._backward is None:
            continue
        node._backward(node.grad)
        node.grad = None  # interior grads are not kept
    out: dict[str, np.ndarray] = {}
    if leaves is not None:
        for leaf in leaves:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
            if leaf.name is not None:
                out[leaf.name] = leaf.grad
    return out


class AdamState:
    """First/second moment accumulators keyed like the parameter dict."""

    def __init__(self, params: dict[str, Tensor]):
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update, in place."""
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise GradientOverflowError(f"gradient overflow in {name}")
        if g.shape != p.data.shape:
            raise AutodiffError(f"adam_step: grad shape {g.shape} != param shape {p.data.shape} for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# checkpoint format: magic, u32 header length, JSON header, packed f64 LE.

_MAGIC = b"PFCKPT01"


def save_named_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    names = sorted(tensors)
    header = {
        "meta": meta or {},
        "tensors": [{"name": n, "shape": list(tensors[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(tensors[n], dtype="<f8").tobytes())


def load_named_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        if f.read(len(_MAGIC)) != _MAGIC:
            raise ValueError(f"{path}: not a partforge checkpoint")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen))
        out = {}
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(f.read(8 * count), dtype="<f8").reshape(shape)
            out[spec["name"]] = arr.astype(np.float64)
    return out, header["meta"]
