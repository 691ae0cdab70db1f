"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every value is held in float64. Half precision is only ever *emulated*
(:func:`half_emulate`) on activations so the overflow behaviour of binary16
can be studied without FP16 hardware.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

FP16_MAX = float(np.finfo(np.float16).max)  # 65504.0


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class GraphError(RuntimeError):
    """Misuse of the differentiation graph (e.g. non-scalar loss)."""


class SoftmaxPolicyError(FloatingPointError):
    """A softmax row had no finite entry to normalise over."""


class Storage(enum.Enum):
    WIDE = "wide"
    HALF = "half-emulated"


@dataclass(frozen=True)
class PrecisionPolicy:
    """Storage precision for activations.

    Softmax accumulation is wide under every policy; the field exists so the
    contract is explicit at call sites.
    """

    storage: Storage = Storage.WIDE
    softmax_accumulation: str = "wide"

    def __post_init__(self):
        if self.softmax_accumulation != "wide":
            raise ValueError("softmax accumulation is always wide")


WIDE = PrecisionPolicy()
HALF = PrecisionPolicy(Storage.HALF)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _node(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GeLU, ``x * Phi(x)``."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
    return _node(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


# -- shape / reduction ------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), backward)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), backward)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis for p in parts)


def getitem(x: Tensor, index) -> Tensor:
    basic = _is_basic(index)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _node(x.data[index], (x,), backward)


def take_rows(weight: Tensor, ids) -> Tensor:
    """Row gather (embedding lookup); gradient scatters additively."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"row id out of range for table of {weight.shape[0]} rows")

    def backward(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids, g)
        return (full,)

    return _node(weight.data[ids], (weight,), backward)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _node(
        np.concatenate([x.data for x in xs], axis=axis),
        xs,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def where_mask(x: Tensor, keep: np.ndarray, fill: float = -np.inf) -> Tensor:
    """Replace entries where ``keep`` is False by a constant."""
    keep = np.broadcast_to(np.asarray(keep, dtype=bool), x.shape)
    return _node(np.where(keep, x.data, fill), (x,), lambda g: (np.where(keep, g, 0.0),))


# -- normalisation ----------------------------------------------------------


def softmax_rows(x: Tensor, policy: PrecisionPolicy = WIDE) -> Tensor:
    """Softmax over the last axis, max-subtracted and accumulated in float64.

    A row whose entries are all ``-inf`` has no distribution to return and
    raises :class:`SoftmaxPolicyError`.
    """
    if not isinstance(policy, PrecisionPolicy):
        raise TypeError("policy must be a PrecisionPolicy")
    z = x.data
    row_max = np.max(z, axis=-1, keepdims=True)
    if np.any(np.isneginf(row_max)):
        raise SoftmaxPolicyError("softmax row is entirely -inf (fully masked)")
    e = np.exp(z - row_max)
    y = e / np.sum(e, axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _node(y, (x,), backward)


def naive_half_softmax(scores) -> np.ndarray:
    """Reference softmax evaluated entirely in binary16 (storage and accumulation).

    Scores past the binary16 range become inf and the row turns into NaN;
    this is the failure the wide path avoids.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        z = np.asarray(scores, dtype=np.float64).astype(np.float16)
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        y = e / e.sum(axis=-1, keepdims=True, dtype=np.float16)
    return y.astype(np.float64)


def half_attention_scores(q, k, accumulate: str = "wide", alpha: float = 1.0) -> np.ndarray:
    """``q k^T / sqrt(d)`` for binary16-stored ``q`` and ``k``.

    ``accumulate="half"`` stores the product in binary16 (overflow -> inf).
    ``accumulate="wide"`` keeps the product in float64. ``alpha > 1`` divides
    ``q`` by ``alpha`` before a binary16 product and multiplies it back in
    float64, keeping the stored scores in range.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    with np.errstate(over="ignore"):
        qh = q.astype(np.float16).astype(np.float64)
        kh = k.astype(np.float16).astype(np.float64)
        scale = 1.0 / np.sqrt(q.shape[-1])
        if accumulate == "wide":
            return (qh @ kh.T) * scale
        if accumulate != "half":
            raise ValueError(f"unknown accumulation {accumulate!r}")
        qa = (qh * (scale / alpha)).astype(np.float16).astype(np.float64)
        stored = (qa @ kh.T).astype(np.float16).astype(np.float64)
    return stored * alpha


def log_softmax_rows(x: Tensor) -> Tensor:
    z = x.data
    shifted = z - np.max(z, axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _node(out, (x,), lambda g: (g - p * np.sum(g, axis=-1, keepdims=True),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        n = x.shape[-1]
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / n)
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _node(out, (x, gain, bias), backward)


def cross_entropy(logits: Tensor, targets, weights) -> Tensor:
    """Weighted mean of ``-log softmax(logits)[target]`` over rows.

    ``weights`` is 0/1 per row; rows with weight 0 contribute nothing.
    """
    targets = np.asarray(targets, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    total = weights.sum()
    if total == 0:
        raise ValueError("cross_entropy over an empty target set")
    z = logits.data
    shifted = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(z.shape[0])
    nll = -logp[rows, targets]
    loss = float((nll * weights).sum() / total)

    def backward(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return (g * p * (weights / total)[:, None],)

    return _node(np.array(loss), (logits,), backward)


# -- positional / regularisation -------------------------------------------


def rope_angles(positions, dim: int, base: float = 10000.0) -> np.ndarray:
    """Angles ``m * theta_i`` with ``theta_i = base^(-2(i-1)/dim)``; shape [L, dim/2]."""
    if dim % 2:
        raise ShapeError(f"rotary dimension must be even, got {dim}")
    theta = base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    return np.outer(np.asarray(positions, dtype=np.float64), theta)


def _rotate_pairs(v: np.ndarray, sign: float) -> np.ndarray:
    # (v0, v1) -> (-v1, v0) for sign=+1; the transpose map for sign=-1
    out = np.empty_like(v)
    out[..., 0::2] = -sign * v[..., 1::2]
    out[..., 1::2] = sign * v[..., 0::2]
    return out


def rope(x: Tensor, positions, base: float = 10000.0) -> Tensor:
    """Rotate adjacent feature pairs of ``x[..., L, d]`` by their position angle."""
    d = x.shape[-1]
    ang = rope_angles(positions, d, base)
    if ang.shape[0] != x.shape[-2]:
        raise ShapeError(f"{ang.shape[0]} positions for sequence axis of {x.shape[-2]}")
    cos = np.repeat(np.cos(ang), 2, axis=-1)
    sin = np.repeat(np.sin(ang), 2, axis=-1)
    out = x.data * cos + _rotate_pairs(x.data, 1.0) * sin
    return _node(out, (x,), lambda g: (g * cos + _rotate_pairs(g * sin, -1.0),))


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _node(x.data * keep, (x,), lambda g: (g * keep,))


def grad_scale(x: Tensor, alpha: float) -> Tensor:
    """Identity in the forward pass; multiplies the incoming gradient by ``alpha``.

    Equivalent to ``x * alpha + x.detach() * (1 - alpha)`` but keeps forward
    values bit-identical to ``x``.
    """
    return _node(x.data, (x,), lambda g: (g * alpha,))


def half_emulate(x) -> Tensor:
    """Round every value to the nearest binary16 value (ties to even).

    Magnitudes past the binary16 range become +/-inf. Gradients pass
    straight through.
    """
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        y = x.data.astype(np.float16).astype(np.float64)
    return _node(y, (x,), lambda g: (g,))


# -- differentiation --------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate ``d loss / d t`` into ``t.grad`` for every leaf requiring grad."""
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires grad")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
