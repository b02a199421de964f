"""Dense float64 tensors with reverse-mode automatic differentiation.

A Tape records primitive operations while active; Tape.gradients replays
them in exact reverse order to accumulate gradients of a scalar loss with
respect to any traced leaf. Tensors are immutable values; recording is
confined to one (single-threaded) training context, so the active tape is
thread-local and independent contexts may run in parallel.

The op set is deliberately small: matrix products, elementwise arithmetic
with limited broadcasting, sigmoid/tanh, row gather/scatter for sparse
incidence structures, concatenation, reductions, a batched matmul for
per-sample parameter gradients, and a fused numerically stable
softmax/cross-entropy.
"""

from __future__ import annotations

import threading

import numpy as np

_local = threading.local()


def _active_tape():
    return getattr(_local, "tape", None)


class Tensor:
    """Immutable dense array of float64 values."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad=False, _unsafe=False):
        arr = np.asarray(data, dtype=np.float64)
        if not _unsafe and not np.all(np.isfinite(arr)):
            raise ValueError("tensor data must be finite")
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all arithmetic routes through module-level ops
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __pow__(self, exponent):
        if exponent != int(exponent) or exponent < 1:
            raise ValueError("only positive integer powers are supported")
        out = self
        for _ in range(int(exponent) - 1):
            out = mul(out, self)
        return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive ops; replays backward in reverse order."""

    def __init__(self):
        self._records = []  # (out_tensor, in_tensors, backward_fn)

    def __enter__(self):
        if _active_tape() is not None:
            raise RuntimeError("a tape is already active in this thread")
        _local.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _local.tape = None
        return False

    def _record(self, out, inputs, backward):
        self._records.append((out, inputs, backward))

    def gradients(self, loss, wrt):
        """Gradients of a scalar loss w.r.t. the given traced leaves.

        Pure: may be called repeatedly on the same tape with different
        losses. Returns a dict keyed by the tensors in ``wrt``; leaves the
        loss does not depend on map to zero arrays.
        """
        if not isinstance(loss, Tensor) or loss.data.ndim != 0:
            raise ValueError("loss must be a scalar tensor")
        grads = {id(loss): np.array(1.0)}
        for out, inputs, backward in reversed(self._records):
            g_out = grads.pop(id(out), None)
            if g_out is None:
                continue
            for t, g in zip(inputs, backward(g_out)):
                if t is None or not t.requires_grad:
                    continue
                acc = grads.get(id(t))
                grads[id(t)] = g if acc is None else acc + g
        return {t: grads.get(id(t), np.zeros_like(t.data)) for t in wrt}


def _trace(out_data, inputs, backward):
    requires = any(t is not None and t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires, _unsafe=True)
    tape = _active_tape()
    if tape is not None and requires:
        tape._record(out, inputs, backward)
    return out


def _unbroadcast(grad, shape):
    # reduce a broadcast gradient back to the operand's shape
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _trace(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _trace(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    return _trace(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return _trace(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def bmm(a, b):
    """Batched matmul [B,m,k] @ [B,k,n]; used for per-sample weight grads."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ValueError(f"bmm shape mismatch: {a.shape} x {b.shape}")
    return _trace(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.transpose(0, 2, 1), a.data.transpose(0, 2, 1) @ g),
    )


def spmm(matrix, x):
    """Sparse constant matrix times dense traced tensor."""
    x = _as_tensor(x)
    return _trace(
        np.asarray(matrix @ x.data),
        (x,),
        lambda g: (np.asarray(matrix.T @ g),),
    )


def sigmoid(a):
    a = _as_tensor(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _trace(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _trace(out, (a,), lambda g: (g * (1.0 - out * out),))


def concat(a, b, axis=1):
    a, b = _as_tensor(a), _as_tensor(b)
    split = a.data.shape[axis]

    def backward(g):
        ga, gb = np.split(g, [split], axis=axis)
        return ga, gb

    return _trace(np.concatenate([a.data, b.data], axis=axis), (a, b), backward)


def tsum(a, axis=None):
    a = _as_tensor(a)

    def backward(g):
        if axis is None:
            return (np.full_like(a.data, g),)
        return (np.expand_dims(g, axis) * np.ones_like(a.data),)

    return _trace(a.data.sum(axis=axis), (a,), backward)


def tmean(a, axis=None):
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis), Tensor(1.0 / n))


def gather_rows(a, idx):
    """out[i] = a[idx[i]]; backward scatter-adds into the source rows."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)

    def backward(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, idx, g)
        return (grad,)

    return _trace(a.data[idx], (a,), backward)


def scatter_sum(a, idx, n_out):
    """out[j] = sum of rows i with idx[i] == j; backward gathers."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    if a.ndim == 1:
        out = np.bincount(idx, weights=a.data, minlength=n_out)
    else:
        out = np.zeros((n_out,) + a.data.shape[1:])
        np.add.at(out, idx, a.data)
    return _trace(out, (a,), lambda g: (g[idx],))


def softmax(a):
    """Row-stabilized softmax; rows sum to 1 within float64 rounding."""
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    out = ez / ez.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _trace(out, (a,), backward)


def softmax_xent(logits, targets, mask=None, reduction="mean"):
    """Cross-entropy of log-softmax rows against integer class targets.

    ``mask`` selects the rows that enter the loss (boolean or index array);
    the loss is the mean (default) or sum of -log softmax(logits)[target]
    over those rows. Fused with log-sum-exp stabilization so logit
    magnitudes up to ~1e3 stay finite.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.intp)
    n, n_classes = logits.data.shape
    if targets.shape != (n,):
        raise ValueError("targets must have one class index per row")
    if np.any(targets < 0) or np.any(targets >= n_classes):
        raise ValueError("target class out of range")
    if mask is None:
        rows = np.arange(n)
    else:
        mask = np.asarray(mask)
        rows = np.flatnonzero(mask) if mask.dtype == bool else mask.astype(np.intp)
    if rows.size == 0:
        raise ValueError("softmax_xent mask selects no rows")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    logp = z - lse[:, None]
    picked = logp[rows, targets[rows]]
    scale = 1.0 / rows.size if reduction == "mean" else 1.0
    loss = -picked.sum() * scale

    def backward(g):
        grad = np.zeros_like(logits.data)
        p = np.exp(logp[rows])
        p[np.arange(rows.size), targets[rows]] -= 1.0
        grad[rows] = p * (g * scale)
        return (grad,)

    return _trace(np.asarray(loss), (logits,), backward)


def xent_rows(logits, targets):
    """Per-row -log softmax(logits)[target], without reduction."""
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.intp)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    logp = z - lse[:, None]
    rows = np.arange(logits.data.shape[0])
    out = -logp[rows, targets]

    def backward(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return (p * g[:, None],)

    return _trace(out, (logits,), backward)
