"""Reverse-mode autodiff over dense numpy arrays.

This is the numeric substrate for the whole model: a small tape-based
autograd with exactly the op set the three transformer stacks need
(matmul, elementwise arithmetic, layer norm, softmax, embedding gather,
mish, concat, slicing, cross-entropy) plus a finite-difference gradient
checker. Everything is deterministic: identical inputs give bitwise
identical outputs, and there is no hidden global state beyond the two
documented switches below.

Precision is a global switch: training defaults to float32, gradient
checks require float64 (`set_default_dtype` / the `precision` context
manager). Every op output is checked for NaN/Inf unless finite checks
are disabled.
"""

from __future__ import annotations

import contextlib
from collections import OrderedDict
from typing import Callable, Iterator, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf, or a checked loss was non-finite."""


_DEFAULT_DTYPE = np.float32
_FINITE_CHECKS = True

# Additive mask value; exp(-1e9) underflows to exactly 0.0 in both float32
# and float64, which is what makes the causality tests bitwise-exact.
MASK_VALUE = -1e9


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError("dtype must be np.float32 or np.float64")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the global dtype (e.g. float64 for grad checks)."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def set_finite_checks(enabled: bool) -> None:
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _FINITE_CHECKS and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


class Tensor:
    """Dense array node in the autodiff graph.

    `data` is a row-major numpy array in the current default dtype. `grad`
    is filled by `backward()` on every node that requires grad. Graphs are
    rebuilt per forward pass; parameters are the only long-lived tensors.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None):
        arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar output."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __truediv__(self, other):
        return div(self, _coerce(other))

    def __rtruediv__(self, other):
        return div(_coerce(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, _coerce(-1.0))

    def __getitem__(self, key):
        return _slice(self, key)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = self.data.reshape(shape)
        src_shape = self.data.shape

        def bw(g):
            _acc(self, g.reshape(src_shape))

        return _node(out_data, (self,), bw, "reshape")

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        out_data = np.transpose(self.data, axes)
        inv = np.argsort(axes)

        def bw(g):
            _acc(self, np.transpose(g, inv))

        return _node(out_data, (self,), bw, "transpose")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    # Never accumulate in place: g may be a view into a child's grad buffer.
    t.grad = g if t.grad is None else t.grad + g


def _node(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(data, op)
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data)
    return Tensor(data, requires_grad=True, parents=tuple(parents), backward=backward)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- arithmetic -----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bw(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))

    return _node(out, (a, b), bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bw(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(-g, b.data.shape))

    return _node(out, (a, b), bw, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bw(g):
        _acc(a, _unbroadcast(g * b.data, a.data.shape))
        _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(out, (a, b), bw, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def bw(g):
        _acc(a, _unbroadcast(g / b.data, a.data.shape))
        _acc(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(out, (a, b), bw, "div")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul requires operands with ndim >= 2")
    out = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _acc(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            if b.data.ndim == 2:
                k = a.data.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
            _acc(b, gb)

    return _node(out, (a, b), bw, "matmul")


def _slice(a: Tensor, key) -> Tensor:
    out = a.data[key]

    def bw(g):
        gx = np.zeros_like(a.data)
        gx[key] = g
        _acc(a, gx)

    return _node(out, (a,), bw, "slice")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(int(lo), int(hi))
                _acc(t, g[tuple(sl)])

    return _node(out, tuple(tensors), bw, "concat")


def gather(table: Tensor, indices) -> Tensor:
    """Embedding lookup: rows of `table` selected by an integer array."""
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ValueError("gather index out of range")
    out = table.data[idx]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        _acc(table, gt)

    return _node(out, (table,), bw, "gather")


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            _acc(a, np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, a.data.shape).copy())

    return _node(out, (a,), bw, "sum")


def mean_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / n)


# -- nonlinearities --------------------------------------------------------


def _np_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def mish(a: Tensor) -> Tensor:
    """x * tanh(softplus(x)); smooth everywhere."""
    sp = np.logaddexp(0.0, a.data)
    t = np.tanh(sp)
    out = a.data * t

    def bw(g):
        local = t + a.data * (1.0 - t * t) * _np_sigmoid(a.data)
        _acc(a, g * local)

    return _node(out, (a,), bw, "mish")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bw(g):
        _acc(a, g * (1.0 - out * out))

    return _node(out, (a,), bw, "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out = _np_sigmoid(a.data)

    def bw(g):
        _acc(a, g * out * (1.0 - out))

    return _node(out, (a,), bw, "sigmoid")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bw(g):
        _acc(a, g * out)

    return _node(out, (a,), bw, "exp")


def log(a: Tensor) -> Tensor:
    """Natural log, clamped below at 1e-12 to keep CE and odds finite."""
    clipped = np.maximum(a.data, 1e-12)
    out = np.log(clipped)

    def bw(g):
        _acc(a, g / clipped)

    return _node(out, (a,), bw, "log")


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data)

    def bw(g):
        _acc(a, g * _np_sigmoid(a.data))

    return _node(out, (a,), bw, "softplus")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)

    def bw(g):
        inside = ((a.data >= lo) & (a.data <= hi)).astype(a.data.dtype)
        _acc(a, g * inside)

    return _node(out, (a,), bw, "clamp")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax; rows sum to 1 within 1e-9."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _acc(a, out * (g - dot))

    return _node(out, (a,), bw, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer norm over the last axis with learned gain/bias."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        d = x.data.shape[-1]
        if gain.requires_grad:
            _acc(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _acc(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _acc(x, inv * (dxhat - m1 - xhat * m2))

    return _node(out, (x, gain, bias), bw, "layer_norm")


# -- losses ----------------------------------------------------------------


def cross_entropy_rows(logits: Tensor, targets) -> Tensor:
    """Per-row -log softmax(logits)[target] for logits of shape (N, V)."""
    tgt = np.asarray(targets)
    if logits.ndim != 2 or tgt.shape != (logits.data.shape[0],):
        raise ValueError("expected logits (N, V) and targets (N,)")
    v = logits.data.shape[1]
    if tgt.size and (tgt.min() < 0 or tgt.max() >= v):
        raise ValueError("cross-entropy target out of range")
    m = logits.data.max(axis=1, keepdims=True)
    z = logits.data - m
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    rows = np.arange(tgt.shape[0])
    out = np.log(denom[:, 0]) - z[rows, tgt]

    def bw(g):
        soft = ez / denom
        gl = soft * g[:, None]
        gl[rows, tgt] -= g
        _acc(logits, gl)

    return _node(out, (logits,), bw, "cross_entropy")


def cross_entropy(logits: Tensor, target: int) -> Tensor:
    """-log softmax(logits)[target] for a single logit row."""
    if logits.ndim != 1:
        raise ValueError("expected a 1-D logit row")
    rows = cross_entropy_rows(logits.reshape(1, -1), np.asarray([target]))
    return sum_(rows)


def masked_mean(rows: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of `rows` over positions where float `mask` is 1."""
    mask = np.asarray(mask, dtype=rows.data.dtype)
    total = float(mask.sum())
    if total == 0.0:
        return Tensor(np.zeros(()))
    return sum_(rows * Tensor(mask)) * (1.0 / total)


def sinusoidal_pe(length: int, dim: int) -> Tensor:
    """Fixed sin/cos positional table: PE[p, 2i]=sin(p/10000^(2i/dim))."""
    if dim % 2 != 0:
        raise ValueError("positional embedding dim must be even")
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / dim)
    pe = np.zeros((length, dim), dtype=np.float64)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return Tensor(pe)


# -- parameters ------------------------------------------------------------


class ParamStore:
    """Named parameter tensors in deterministic (insertion) order.

    `decay=False` marks parameters exempt from weight decay (biases and
    norm gains). Gradients live on the tensors themselves.
    """

    def __init__(self) -> None:
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self._decay: dict[str, bool] = {}

    def add(self, name: str, value: np.ndarray, decay: bool = True) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.asarray(value, dtype=_DEFAULT_DTYPE), requires_grad=True)
        self._params[name] = t
        self._decay[name] = decay
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def decay_enabled(self, name: str) -> bool:
        return self._decay[name]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def total_parameters(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def astype(self, dtype) -> None:
        for t in self._params.values():
            t.data = t.data.astype(dtype)
            t.grad = None


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: ParamStore,
    n_probe: int = 50,
    eps: float = 1e-5,
    seed: int = 0,
) -> float:
    """Max relative error between reverse-mode and central-difference grads.

    Probes `n_probe` seeded random coordinates across all parameters.
    Requires float64 parameters: float32 has too little headroom for
    eps=1e-5 central differences.
    """
    for name, t in params.items():
        if t.data.dtype != np.float64:
            raise ValueError(f"grad_check requires float64 params ({name} is {t.data.dtype})")
    params.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("loss is non-finite at the evaluation point")
    loss.backward()
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in params.items()
    }

    names = params.names()
    sizes = np.array([params[n].data.size for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    rng = np.random.default_rng(seed)
    count = min(n_probe, total)
    coords = rng.choice(total, size=count, replace=False)

    max_rel = 0.0
    for c in coords:
        pi = int(np.searchsorted(offsets, c, side="right") - 1)
        flat = int(c - offsets[pi])
        t = params[names[pi]]
        orig = t.data.flat[flat]
        t.data.flat[flat] = orig + eps
        lo_hi = float(loss_fn().data)
        t.data.flat[flat] = orig - eps
        lo_lo = float(loss_fn().data)
        t.data.flat[flat] = orig
        if not (np.isfinite(lo_hi) and np.isfinite(lo_lo)):
            raise NonFiniteError("loss became non-finite during probing")
        fd = (lo_hi - lo_lo) / (2.0 * eps)
        ad = float(analytic[names[pi]].flat[flat])
        rel = abs(ad - fd) / max(1e-8, abs(ad) + abs(fd))
        max_rel = max(max_rel, rel)
    return max_rel
