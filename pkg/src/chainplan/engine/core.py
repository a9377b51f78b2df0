"""Dense-tensor numeric core with reverse-mode automatic differentiation.

numpy owns the raw arrays and the kernels (matmul, einsum, reductions);
everything else lives here: the operation registry, the recording Tape,
per-op backward rules, and the Parameter type the training loop consumes.

Tensors detached from any tape are immutable values and safe to share.
A Tape is confined to the thread that opened it; the active-tape stack is
thread-local for that reason.
"""

from __future__ import annotations

import itertools
import os
import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class EngineError(Exception):
    """Raised on shape mismatches, unknown ops, or contract violations."""


class NonFiniteError(EngineError):
    """A forward operation produced NaN or Inf."""


# ---------------------------------------------------------------------------
# precision modes
# ---------------------------------------------------------------------------

_DTYPES = {"f32": np.float32, "f64": np.float64}
_state = threading.local()


def _initial_dtype() -> np.dtype:
    name = os.environ.get("PLANCTL_PRECISION", "f32")
    if name not in _DTYPES:
        raise EngineError(f"PLANCTL_PRECISION must be f32 or f64, got {name!r}")
    return np.dtype(_DTYPES[name])


def default_dtype() -> np.dtype:
    if not hasattr(_state, "dtype"):
        _state.dtype = _initial_dtype()
    return _state.dtype


def set_default_dtype(name: str) -> None:
    if name not in _DTYPES:
        raise EngineError(f"unknown precision mode {name!r}")
    _state.dtype = np.dtype(_DTYPES[name])


class using_dtype:
    """Context manager pinning the default dtype, e.g. ``with using_dtype('f64')``."""

    def __init__(self, name: str):
        self._name = name
        self._prev = None

    def __enter__(self):
        self._prev = default_dtype()
        set_default_dtype(self._name)
        return self

    def __exit__(self, *exc):
        _state.dtype = self._prev
        return False


def finite_checks_enabled() -> bool:
    return getattr(_state, "finite_checks", True)


class finite_checks:
    """Toggle per-op finiteness validation.

    The training loop disables per-op checks for speed and validates the
    scalar loss each step instead; everywhere else the default stays on.
    """

    def __init__(self, enabled: bool):
        self._enabled = enabled
        self._prev = True

    def __enter__(self):
        self._prev = finite_checks_enabled()
        _state.finite_checks = self._enabled
        return self

    def __exit__(self, *exc):
        _state.finite_checks = self._prev
        return False


# ---------------------------------------------------------------------------
# tensors, parameters, tape
# ---------------------------------------------------------------------------

_ids = itertools.count()


class Tensor:
    """Immutable dense array plus graph identity.

    ``data`` is row-major float32/float64; ``tid`` identifies the node on
    whatever tape recorded it (leaves keep ``tape_id=None``).
    """

    __slots__ = ("data", "tid", "requires_grad", "tape_id")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=dtype if dtype is not None else default_dtype())
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(default_dtype())
        self.data = arr
        self.tid = next(_ids)
        self.requires_grad = requires_grad
        self.tape_id = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise EngineError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"


class Parameter(Tensor):
    """Trainable tensor with a same-shaped gradient accumulator and a stable name."""

    __slots__ = ("grad", "name")

    def __init__(self, data, name: str, dtype=None):
        super().__init__(data, dtype=dtype, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def step(self, lr: float) -> None:
        self.data = self.data - lr * self.grad

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


class TapeNode:
    """One recorded operation: kind, operand ids, result id, backward rule."""

    __slots__ = ("op", "inputs", "input_ids", "output_id", "backward")

    def __init__(self, op: str, inputs: tuple, output: Tensor,
                 backward: Callable[[np.ndarray], Sequence]):
        self.op = op
        self.inputs = inputs
        self.input_ids = tuple(t.tid for t in inputs)
        self.output_id = output.tid
        self.backward = backward


class Tape:
    """Ordered record of operations, usable as a context manager.

    Records are appended in execution order, so every operand id precedes
    its result id (the topological-order invariant).
    """

    def __init__(self):
        self.records: list[TapeNode] = []
        self.params: dict[str, Parameter] = {}
        self.uid = next(_ids)

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def _record(self, node: TapeNode) -> None:
        self.records.append(node)
        for t in node.inputs:
            if isinstance(t, Parameter):
                self.params.setdefault(t.name, t)

    def gradients(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Reverse sweep from ``loss``; returns tensor-id -> gradient array."""
        if loss.data.size != 1:
            raise EngineError(f"loss must be scalar, got shape {loss.shape}")
        if loss.tape_id is not None and loss.tape_id != self.uid:
            raise EngineError("loss was not recorded on this tape")
        grads: dict[int, np.ndarray] = {loss.tid: np.ones_like(loss.data)}
        for node in reversed(self.records):
            g_out = grads.get(node.output_id)
            if g_out is None:
                continue
            for t, g in zip(node.inputs, node.backward(g_out)):
                if g is None:
                    continue
                if t.tid in grads:
                    grads[t.tid] = grads[t.tid] + g
                else:
                    grads[t.tid] = g
        return grads


def _tape_stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def backprop(tape: Tape, loss: Tensor,
             params: Iterable[Parameter] | None = None) -> dict[str, Tensor]:
    """Populate gradients for every parameter reachable from ``loss``.

    Unreachable parameters get zero gradient. Gradients accumulate into
    ``param.grad``; the returned map holds this call's contribution only.
    """
    grads = tape.gradients(loss)
    if params is None:
        params = tape.params.values()
    out: dict[str, Tensor] = {}
    for p in params:
        g = grads.get(p.tid)
        if g is None:
            g = np.zeros_like(p.data)
        p.grad = p.grad + g
        out[p.name] = Tensor(g, dtype=g.dtype)
    return out


# ---------------------------------------------------------------------------
# op plumbing
# ---------------------------------------------------------------------------

def _check_finite(arr: np.ndarray, op: str) -> None:
    if not finite_checks_enabled():
        return
    # A finite sum implies every element is finite (inf/nan always propagate
    # through the reduction); one pass, no boolean temporary.
    if not np.isfinite(arr.sum()):
        if np.isfinite(arr).all():
            return  # pathological overflow of the probe sum itself
        raise NonFiniteError(f"non-finite result from {op!r}")


def _emit(op: str, inputs: tuple, data: np.ndarray, backward) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data, dtype=data.dtype)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.tape_id = tape.uid
        tape._record(TapeNode(op, inputs, out, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise EngineError("matmul operands must have ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise EngineError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    # Stacked-left @ plain-matrix is the hot path (every linear layer);
    # collapsing to a single GEMM beats numpy's batched-matmul loop.
    if a.ndim > 2 and b.ndim == 2:
        lead = a.shape[:-1]
        a2 = a.data.reshape(-1, a.shape[-1])
        data = (a2 @ b.data).reshape(*lead, b.shape[-1])

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape)
            gb = a2.T @ g2
            return ga, gb

        return _emit("matmul", (a, b), data, backward)

    data = a.data @ b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _emit("matmul", (a, b), data, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", (a, b), data, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", (a, b), data, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit("mul", (a, b), data, backward)


def scale(a: Tensor, s: float) -> Tensor:
    a = _as_tensor(a)
    data = a.data * s
    return _emit("scale", (a,), data, lambda g: (g * s,))


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    data = np.maximum(a.data, 0.0)
    return _emit("relu", (a,), data, lambda g: (g * (a.data > 0),))


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if (a.data <= 0).any():
        raise EngineError("log of non-positive value")
    data = np.log(a.data)
    return _emit("log", (a,), data, lambda g: (g / a.data,))


def power(a: Tensor, exponent: float) -> Tensor:
    """Elementwise a**p for a real exponent; requires a > 0 unless p is integral."""
    a = _as_tensor(a)
    if float(exponent) != int(exponent) and (a.data < 0).any():
        raise EngineError("fractional power of negative value")
    data = a.data ** exponent

    def backward(g):
        if exponent == 0:
            return (np.zeros_like(a.data),)
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _emit("pow", (a,), data, backward)


def clip_min(a: Tensor, lo: float) -> Tensor:
    """max(a, lo); clipped coordinates get zero gradient."""
    a = _as_tensor(a)
    data = np.maximum(a.data, lo)
    return _emit("clip-min", (a,), data, lambda g: (g * (a.data > lo),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - dot),)

    return _emit("softmax", (a,), data, backward)


def layer_norm(a: Tensor, axis: int = -1, eps: float = 1e-6) -> Tensor:
    """Normalize to zero mean / unit variance along ``axis`` (no affine)."""
    a = _as_tensor(a)
    mean_ = a.data.mean(axis=axis, keepdims=True)
    var = a.data.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    data = (a.data - mean_) * inv

    def backward(g):
        gm = g.mean(axis=axis, keepdims=True)
        gy = (g * data).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - data * gy),)

    return _emit("layer-norm", (a,), data, backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    if not tensors:
        raise EngineError("concat of empty sequence")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit("concat", tensors, data, backward)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    key = [slice(None)] * a.ndim
    key[axis] = slice(start, stop)
    key = tuple(key)
    data = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _emit("slice", (a,), data, backward)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` by integer index (the embedding-gather primitive)."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise EngineError("take expects a 1-D index list")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[axis]):
        raise EngineError(f"take index out of range for axis extent {a.shape[axis]}")
    data = np.take(a.data, idx, axis=axis)

    def backward(g):
        full = np.zeros_like(a.data)
        key = [slice(None)] * a.ndim
        key[axis] = idx
        np.add.at(full, tuple(key), g)
        return (full,)

    return _emit("embedding-gather", (a,), data, backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    denom = a.size if axis is None else np.prod(
        [a.shape[ax] for ax in np.atleast_1d(axis)])

    def backward(g):
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / denom,)

    return _emit("mean", (a,), data, backward)


def total(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Sum reduction (named to avoid shadowing builtins)."""
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", (a,), data, backward)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    a = _as_tensor(a)
    order = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    data = np.transpose(a.data, order)
    inverse = tuple(np.argsort(order))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _emit("transpose", (a,), data, backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    data = a.data.reshape(shape)
    return _emit("reshape", (a,), data, lambda g: (g.reshape(a.shape),))


def expand(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Broadcast to ``shape``; backward sums over the broadcast axes."""
    a = _as_tensor(a)
    data = np.broadcast_to(a.data, tuple(shape)).copy()
    return _emit("expand", (a,), data, lambda g: (_unbroadcast(g, a.shape),))


def conv1d(x: Tensor, w: Tensor) -> Tensor:
    """Valid cross-correlation along the last axis, stride 1.

    ``x`` is (C_in, L) or (B, C_in, L); ``w`` is (C_out, C_in, K).
    Result length is L - K + 1.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if w.ndim != 3:
        raise EngineError("conv1d kernel must be (C_out, C_in, K)")
    squeezed = x.ndim == 2
    xd = x.data[None] if squeezed else x.data
    if xd.ndim != 3 or xd.shape[1] != w.shape[1]:
        raise EngineError(f"conv1d shape mismatch: x {x.shape}, w {w.shape}")
    k = w.shape[2]
    if xd.shape[2] < k:
        raise EngineError("conv1d input shorter than kernel")
    win = np.lib.stride_tricks.sliding_window_view(xd, k, axis=2)  # (B,C,Lo,K)
    data = np.einsum("bclk,ock->bol", win, w.data)
    if squeezed:
        data = data[0]

    def backward(g):
        gb = g[None] if squeezed else g
        gw = np.einsum("bol,bclk->ock", gb, win)
        gx = np.zeros_like(xd)
        lo = gb.shape[2]
        for kk in range(k):
            gx[:, :, kk:kk + lo] += np.einsum("bol,oc->bcl", gb, w.data[:, :, kk])
        return (gx[0] if squeezed else gx), gw

    return _emit("conv1d", (x, w), data, backward)


# ---------------------------------------------------------------------------
# registry / apply entry point
# ---------------------------------------------------------------------------

OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "elementwise-mul": mul,
    "scale": scale,
    "relu": relu,
    "softmax": softmax,
    "layer-norm": layer_norm,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "slice": slice_axis,
    "mean": mean,
    "sum": total,
    "conv1d": conv1d,
    "embedding-gather": take,
    "transpose": transpose,
    "reshape": reshape,
    "expand": expand,
    "log": log,
    "pow": power,
    "clip-min": clip_min,
}


def apply(op_kind: str, *operands, **kwargs) -> Tensor:
    """Dispatch by op kind string; records on the active tape like any op."""
    fn = OPS.get(op_kind)
    if fn is None:
        raise EngineError(f"unknown op {op_kind!r}")
    return fn(*operands, **kwargs)
