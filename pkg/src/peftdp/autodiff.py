"""Dense float64 tensors with tape-based reverse-mode differentiation.

The primitive set is exactly what a small transformer classifier needs:
matmul, add, elementwise multiply, row softmax (max-subtracted), layer
normalization, GELU/ReLU/tanh, embedding lookup, cross-entropy-with-logits,
reshapes/transposes, reductions, and constant masking. Recording happens
while a GradientTape is active; backward() replays the tape in reverse
order and returns gradients keyed by parameter name.

Tensors are immutable values once created. Every forward primitive checks
its output for NaN/Inf and raises NonFiniteError on violation.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractError, NonFiniteError

LAYER_NORM_EPS = 1e-12
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_CUBIC = 0.044715


class Tensor:
    """A dense float64 array, optionally named (parameters carry names)."""

    __slots__ = ("data", "name")

    def __init__(self, data, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out, inputs, vjp):
        self.out = out          # output Tensor (kept alive while the tape lives)
        self.inputs = inputs    # tuple of input Tensors
        self.vjp = vjp          # grad_out -> tuple of grads aligned with inputs


_TAPE_STACK: list["GradientTape"] = []


class GradientTape:
    """Ordered record of primitive applications; single-owner, not thread-shared."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._recorded = False

    def __enter__(self):
        self._recorded = True
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes must be exited in LIFO order"
        return False

    def __len__(self):
        return len(self._nodes)


def _record(out, inputs, vjp):
    if _TAPE_STACK:
        _TAPE_STACK[-1]._nodes.append(_Node(out, inputs, vjp))


def _check_finite(data: np.ndarray, op: str) -> None:
    # single-pass reduction; NaN/Inf anywhere poisons the sum (values are O(1),
    # so the sum itself cannot overflow)
    if not math.isfinite(float(data.sum())):
        raise NonFiniteError(f"{op} produced non-finite values")


def _make(data, inputs=(), vjp=None, op: str = "op") -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if vjp is not None:
        _record(out, inputs, vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ContractError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    ad_, bd = a.data, b.data

    if bd.ndim == 2:
        # stacked-input x 2-d weight: collapse to one GEMM
        k, m = bd.shape
        a2 = ad_.reshape(-1, k)
        out = (a2 @ bd).reshape(ad_.shape[:-1] + (m,))

        def vjp(g):
            g2 = g.reshape(-1, m)
            return (g2 @ bd.T).reshape(ad_.shape), a2.T @ g2

        return _make(out, (a, b), vjp, "matmul")

    out = np.matmul(ad_, bd)

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, bd.swapaxes(-1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(ad_.swapaxes(-1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), vjp, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ContractError(f"add shapes not broadcastable: {a.shape} vs {b.shape}") from exc
    vjp = lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    return _make(out, (a, b), vjp, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ContractError(f"mul shapes not broadcastable: {a.shape} vs {b.shape}") from exc

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), vjp, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(a.data * s, (a,), lambda g: (g * s,), "scale")


def add_const(a: Tensor, c) -> Tensor:
    """Add a constant array (attention mask bias); gradient passes through."""
    c = np.asarray(c, dtype=np.float64)
    return _make(a.data + c, (a,), lambda g: (_unbroadcast(g, a.shape),), "add_const")


def mul_const(a: Tensor, c) -> Tensor:
    """Multiply by a constant array (dropout/pooling masks)."""
    c = np.asarray(c, dtype=np.float64)
    return _make(a.data * c, (a,), lambda g: (_unbroadcast(g * c, a.shape),), "mul_const")


def _softmax_rows(shifted: np.ndarray) -> np.ndarray:
    """In-place softmax of an already-copied, max-shifted row array."""
    np.exp(shifted, out=shifted)
    shifted /= shifted.sum(axis=-1, keepdims=True)
    return shifted


def _softmax_vjp(out):
    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        r = g - dot
        r *= out
        return (r,)
    return vjp


def softmax(x: Tensor) -> Tensor:
    """Row softmax over the last axis, computed with max subtraction."""
    out = x.data - x.data.max(axis=-1, keepdims=True)
    out = _softmax_rows(out)
    return _make(out, (x,), _softmax_vjp(out), "softmax")


def masked_softmax(x: Tensor, mask_bias) -> Tensor:
    """softmax(x + mask_bias) with a constant additive mask (one temporary)."""
    out = x.data + np.asarray(mask_bias, dtype=np.float64)
    out -= out.max(axis=-1, keepdims=True)
    out = _softmax_rows(out)
    return _make(out, (x,), _softmax_vjp(out), "masked_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ContractError(f"layer_norm gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xhat = x.data - mu
    var = np.einsum("...d,...d->...", xhat, xhat)[..., None] / d
    inv = 1.0 / np.sqrt(var + eps)
    xhat *= inv
    out = xhat * gain.data
    out += bias.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        gx = g * gain.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return _make(out, (x, gain, bias), vjp, "layer_norm")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    v = x.data
    t = v * v
    t *= v
    t *= _GELU_CUBIC
    t += v
    t *= _GELU_C
    np.tanh(t, out=t)
    out = 1.0 + t
    out *= v
    out *= 0.5

    def vjp(g):
        du = v * v
        du *= 3.0 * _GELU_CUBIC
        du += 1.0
        du *= _GELU_C                 # d(inner)/dv
        tt = t * t
        np.subtract(1.0, tt, out=tt)  # sech^2
        tt *= du
        tt *= v
        dv = 1.0 + t
        dv += tt
        dv *= 0.5
        dv *= g
        return (dv,)

    return _make(out, (x,), vjp, "gelu")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)
    return _make(out, (x,), lambda g: (g * (x.data > 0.0),), "relu")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of `table` (vocab x dim) by an integer id array."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ContractError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(
            f"embedding id out of range [0, {table.shape[0]}): "
            f"min={ids.min()} max={ids.max()}")
    out = table.data[ids]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _make(out, (table,), vjp, "embedding_lookup")


def cross_entropy_with_logits(logits: Tensor, labels) -> Tensor:
    """Per-sample softmax cross entropy. logits (B, C), integer labels (B,)."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ContractError(f"logits must be 2-d, got shape {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise ContractError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ContractError(f"label out of range [0, {c})")
    z = logits.data
    zmax = z.max(axis=-1, keepdims=True)
    e = np.exp(z - zmax)
    sum_e = e.sum(axis=-1, keepdims=True)
    lse = zmax[:, 0] + np.log(sum_e[:, 0])
    out = lse - z[np.arange(n), labels]
    probs = e / sum_e

    def vjp(g):
        dz = probs * g[:, None]
        dz[np.arange(n), labels] -= g
        return (dz,)

    return _make(out, (logits,), vjp, "cross_entropy_with_logits")


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = x.data.transpose(axes)
    return _make(out, (x,), lambda g: (g.transpose(inverse),), "transpose")


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), vjp, "reduce_sum")


def mean_all(x: Tensor) -> Tensor:
    """Mean over every element; the usual reduction from per-sample losses."""
    return scale(reduce_sum(x), 1.0 / x.size)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def backward(tape: GradientTape, loss: Tensor, parameters) -> dict[str, Tensor]:
    """Backpropagate from a scalar `loss` through `tape`.

    Returns one gradient tensor per parameter, keyed by parameter name and
    shaped like the parameter. Parameters the loss does not reach get exact
    zeros. Each tape node is visited once, in reverse recording order;
    fan-out gradients accumulate additively.
    """
    if not tape._recorded:
        raise ContractError("tape was never activated; nothing recorded")
    if loss.data.ndim != 0 and loss.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    params = list(parameters)
    for p in params:
        if p.name is None:
            raise ContractError("backward parameters must be named tensors")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape._nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.vjp(g)):
            acc = grads.get(id(t))
            if acc is None:
                grads[id(t)] = gi
            else:
                grads[id(t)] = acc + gi

    result = {}
    for p in params:
        g = grads.get(id(p))
        result[p.name] = Tensor(g if g is not None else np.zeros_like(p.data))
    return result
