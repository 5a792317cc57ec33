"""Dense tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are recorded in creation
order, which is already a topological order, so :func:`backward` is a single
reverse sweep over the records.  With no active tape nothing is recorded and
outputs never require gradients (an implicit no-grad mode).

Everything is float32 by default.  Tensors built from float64 arrays stay
float64, which is what the finite-difference gradient checks use.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from afd.errors import DimensionError, InputError, UsageError

_FLOAT_TYPES = (np.float32, np.float64)
ANGULAR_EPS = 1e-12


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.type in _FLOAT_TYPES:
                arr = data
            elif isinstance(data, _FLOAT_TYPES):
                arr = np.asarray(data)  # 0-d results of numpy arithmetic keep their precision
            else:
                arr = np.asarray(data, dtype=np.float32)
        else:
            arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered log of primitive applications; use as a context manager."""

    records: list[Record] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def __len__(self) -> int:
        return len(self.records)


_local = threading.local()


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _emit(op: str, inputs: tuple[Tensor, ...], out: np.ndarray, backward_fn) -> Tensor:
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    if needs:
        tape.records.append(Record(op, inputs, result, backward_fn))
    return result


def backward(loss: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    Returns a mapping from leaf tensor to its gradient. Gradients accumulate
    into an existing ``.grad`` buffer the way most frameworks do.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    pending: dict[int, tuple[Tensor, np.ndarray]] = {}
    if loss.requires_grad:
        pending[id(loss)] = (loss, np.ones_like(loss.data))
    for rec in reversed(tape.records):
        entry = pending.pop(id(rec.output), None)
        if entry is None:
            continue
        in_grads = rec.backward(entry[1])
        for t, g in zip(rec.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            prev = pending.get(id(t))
            pending[id(t)] = (t, g if prev is None else prev[1] + g)

    leaves: dict[Tensor, np.ndarray] = {}
    for t, g in pending.values():
        g = g.astype(t.dtype, copy=False).reshape(t.shape)
        t.grad = g if t.grad is None else t.grad + g
        leaves[t] = t.grad
    return leaves


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------


def stop_gradient(x: Tensor) -> Tensor:
    """Same values, detached from any graph."""
    return Tensor(x.data, requires_grad=False)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a.dtype)
    if b.data.ndim == 0:
        return _emit("add_scalar", (a, b), a.data + b.data, lambda g: (g, np.asarray(g.sum(), dtype=g.dtype)))
    _check_same_shape(a, b, "add")
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def neg(a: Tensor) -> Tensor:
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape
    return _emit("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(src),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def _matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # float32 BLAS rounding depends on where a row sits in the batch; a float64
    # accumulation rounded back makes each output row a function of its inputs only.
    out_dtype = np.result_type(a, b)
    if out_dtype == np.float64:
        return a @ b
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(out_dtype)


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """y = x W^T + b for x:[batch,in], W:[out,in], b:[out]."""
    if x.ndim != 2 or W.ndim != 2 or b.ndim != 1:
        raise DimensionError(f"linear: expected 2-D x, 2-D W, 1-D b; got {x.shape}, {W.shape}, {b.shape}")
    if x.shape[1] != W.shape[1] or W.shape[0] != b.shape[0]:
        raise DimensionError(f"linear: incompatible shapes x{x.shape} W{W.shape} b{b.shape}")
    xd, Wd = x.data, W.data

    def _bw(g):
        return (
            _matmul(g, Wd) if x.requires_grad else None,
            _matmul(g.T, xd) if W.requires_grad else None,
            g.sum(axis=0) if b.requires_grad else None,
        )

    return _emit("linear", (x, W, b), _matmul(xd, Wd.T) + b.data, _bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", (x,), np.where(mask, x.data, x.dtype.type(0)), lambda g: (g * mask,))


def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, K: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. x:[N,C,H,W], K:[O,C,kh,kw], b:[O]."""
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: invalid stride={stride} / padding={padding}")
    if x.ndim != 4 or K.ndim != 4 or b.ndim != 1:
        raise DimensionError(f"conv2d: expected 4-D x/K and 1-D b; got {x.shape}, {K.shape}, {b.shape}")
    n, c, h, w = x.shape
    o, ck, kh, kw = K.shape
    if ck != c or b.shape[0] != o:
        raise DimensionError(f"conv2d: channel mismatch x{x.shape} K{K.shape} b{b.shape}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    oh, ow = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :oh, :ow]  # [N,C,oh,ow,kh,kw]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)
    Kd = K.data
    Kmat = Kd.reshape(o, -1)
    out = (_matmul(cols, Kmat.T) + b.data).reshape(n, oh, ow, o).transpose(0, 3, 1, 2)

    def _bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, o)
        dK = _matmul(gm.T, cols).reshape(K.shape) if K.requires_grad else None
        db = g.sum(axis=(0, 2, 3)) if b.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = _matmul(gm, Kmat).reshape(n, oh, ow, c, kh, kw)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        return dx, dK, db

    return _emit("conv2d", (x, K, b), np.ascontiguousarray(out), _bw)


def _check_labels(labels, batch: int, num_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (batch,):
        raise InputError(f"labels must have shape ({batch},), got {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise InputError(f"labels must lie in [0, {num_classes}), got range [{y.min()}, {y.max()}]")
    return y.astype(np.int64)


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch-mean cross-entropy of integer ``labels`` under ``softmax(logits)``."""
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: logits must be 2-D, got {logits.shape}")
    n, c = logits.shape
    y = _check_labels(labels, n, c)
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, y].mean()

    def _bw(g):
        grad = np.exp(logp)
        grad[rows, y] -= 1
        return (grad * (g / n),)

    return _emit("softmax_cross_entropy", (logits,), np.asarray(loss, dtype=logits.dtype), _bw)


def angular_distance(u: Tensor, v: Tensor) -> Tensor:
    """Batch mean of ``1 - cos(u_i, v_i)`` over rows; values lie in [0, 2]."""
    if u.ndim != 2:
        raise DimensionError(f"angular_distance: expected 2-D inputs, got {u.shape}")
    _check_same_shape(u, v, "angular_distance")
    ud, vd = u.data, v.data
    n = ud.shape[0]
    nu = np.sqrt((ud * ud).sum(axis=1, keepdims=True))
    nv = np.sqrt((vd * vd).sum(axis=1, keepdims=True))
    dot = (ud * vd).sum(axis=1, keepdims=True)
    denom = nu * nv + ud.dtype.type(ANGULAR_EPS)
    cos = dot / denom
    value = (1 - cos).mean()

    def _bw(g):
        s = -g / n
        # d cos / du = v/denom - dot * nv * (u/nu) / denom^2, with u/nu := 0 on zero rows
        with np.errstate(divide="ignore", invalid="ignore"):
            uhat = np.where(nu > 0, ud / nu, 0)
            vhat = np.where(nv > 0, vd / nv, 0)
        du = vd / denom - dot * nv * uhat / denom**2 if u.requires_grad else None
        dv = ud / denom - dot * nu * vhat / denom**2 if v.requires_grad else None
        return (None if du is None else s * du, None if dv is None else s * dv)

    return _emit("angular_distance", (u, v), np.asarray(value, dtype=ud.dtype), _bw)


# --------------------------------------------------------------------------
# gradient-check oracle
# --------------------------------------------------------------------------


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, step: float = 1e-3) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h``, evaluated in float64."""
    if step <= 0:
        raise InputError("finite-difference step must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)
    flat, gflat = base.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(f(base))
        flat[i] = orig - step
        lo = float(f(base))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def relative_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def gradient_check(fn: Callable[[dict[str, Tensor]], Tensor], inputs: dict[str, np.ndarray],
                   wrt: Sequence[str] | None = None, step: float = 1e-3) -> dict[str, float]:
    """Compare tape gradients of ``fn`` with central differences, both in float64.

    ``fn`` maps a dict of tensors to a scalar tensor. Returns the norm-wise
    relative error for each input named in ``wrt`` (default: all).
    """
    wrt = list(inputs) if wrt is None else list(wrt)
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in inputs.items()}
    tensors = {k: Tensor(v, requires_grad=k in wrt) for k, v in arrays.items()}
    with Tape() as tape:
        loss = fn(tensors)
    backward(loss, tape)
    errors = {}
    for name in wrt:
        analytic = tensors[name].grad
        if analytic is None:
            analytic = np.zeros_like(arrays[name])

        def f(x, name=name):
            feed = {k: Tensor(x if k == name else v) for k, v in arrays.items()}
            return fn(feed).item()

        errors[name] = relative_error(analytic, finite_difference_gradient(f, arrays[name], step))
    return errors
