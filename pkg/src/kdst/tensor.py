"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation records its parents and a backward rule on the
output tensor. ``backward`` orders the recorded graph topologically and replays
the rules in reverse, accumulating gradients into leaf tensors.

Broadcasting is limited to leading-axis expansion: an operand may be combined
with another whose shape is a suffix of its own (e.g. a bias ``[d]`` with an
activation ``[B, T, d]``).
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

DEFAULT_DTYPE = np.float32
LOG_FLOOR = 1e-10

_grad_enabled = True
# bumped by every dropout that actually draws random numbers
_stochastic_calls = 0


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype, order="C")
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

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self.dtype)))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar is supported")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def backward(self) -> None:
        backward(self)


def _wrap(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], rule) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = rule
    return out


def _check_suffix(a: tuple, b: tuple, op: str) -> None:
    """Allow equal shapes or leading-axis expansion of the shorter operand."""
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if long_[len(long_) - len(short):] != short:
        raise DimensionError(f"{op}: shapes {a} and {b} are not broadcastable along leading axes")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead > 0 else g


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, a.dtype.type(0))
    return _make(out, (a,), lambda g: (g * (out > 0),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor, floor: float = LOG_FLOOR) -> Tensor:
    """Natural log of ``max(a, floor)``; clamped entries receive no gradient."""
    if np.isnan(a.data).any():
        raise NumericError("log: NaN input")
    clamped = a.data < floor
    x = np.where(clamped, a.dtype.type(floor), a.data)
    return _make(np.log(x), (a,), lambda g: (np.where(clamped, 0, g / x).astype(g.dtype),))


def dropout_key(seed: int, site: int, step: int) -> np.ndarray:
    return np.array([seed & 0xFFFFFFFFFFFFFFFF, ((site & 0xFFFFFFFF) << 32) | (step & 0xFFFFFFFF)], dtype=np.uint64)


def dropout(a: Tensor, p: float, key, training: bool = True) -> Tensor:
    """Inverted dropout drawn from a counter-based Philox stream keyed by ``key``.

    ``key`` is any value accepted by ``np.random.Philox(key=...)``; use
    :func:`dropout_key` to derive it from (seed, site, step).
    """
    if not training or p == 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must be in [0, 1), got {p}")
    global _stochastic_calls
    _stochastic_calls += 1
    rng = np.random.Generator(np.random.Philox(key=key))
    keep = rng.random(a.shape, dtype=np.float32) >= p
    m = keep.astype(a.dtype) * a.dtype.type(1.0 / (1.0 - p))
    return _make(a.data * m, (a,), lambda g: (g * m,))


def masked_fill(a: Tensor, keep: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``keep`` is False by ``value``; ``keep`` broadcasts."""
    keep = np.broadcast_to(keep, a.shape)
    out = np.where(keep, a.data, a.dtype.type(value))
    return _make(out, (a,), lambda g: (np.where(keep, g, g.dtype.type(0)),))


# ------------------------------------------------------------------- linear

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over leading axes; ``b`` may be a shared 2-D matrix."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    _check_suffix(a.shape[:-2], b.shape[:-2], "matmul")
    ad, bd = a.data, b.data
    flat = bd.ndim == 2 and ad.ndim > 2
    if flat:
        # one 2-D GEMM is much faster than numpy's stacked small products
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + bd.shape[-1:])
    else:
        out = ad @ bd

    def rule(g):
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape)
            gb = ad.reshape(-1, ad.shape[-1]).T @ g2
        else:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(out, (a, b), rule)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(out, (a,), rule)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis, keepdims), 1.0 / float(n))


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise DimensionError(f"embedding: ids outside [0, {weight.shape[0]})")
    w = weight.data

    def rule(g):
        gw = np.zeros_like(w)
        np.add.at(gw, ids.ravel(), g.reshape(-1, w.shape[1]))
        return (gw,)

    return _make(w[ids], (weight,), rule)


def take_last(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select ``a[..., idx[...]]`` along the last axis."""
    idx = np.asarray(idx)[..., None]
    src = a.shape

    def rule(g):
        ga = np.zeros(src, dtype=g.dtype)
        np.put_along_axis(ga, idx, g[..., None], axis=-1)
        return (ga,)

    return _make(np.take_along_axis(a.data, idx, axis=-1)[..., 0], (a,), rule)


# ------------------------------------------------------------ normalization

def _require_finite(x: np.ndarray, op: str) -> None:
    if not np.isfinite(x).all():
        raise NumericError(f"{op}: non-finite input")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    _require_finite(a.data, "softmax")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (a,), rule)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    _require_finite(a.data, "log_softmax")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def rule(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply per-feature gain and bias."""
    if eps <= 0:
        raise ContractError("layer_norm: eps must be positive")
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs input {x.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = xd.shape[-1]

    def rule(g):
        gx_hat = g * gain.data
        gx = inv / n * (n * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gain, bias), rule)


# ------------------------------------------------------------------ autodiff

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every reachable leaf with d(loss)/d(leaf).

    Gradients accumulate across calls; reset them with ``zero_grad``.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=p.dtype)
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg


def grad_check(f: Callable[..., Tensor], inputs: Iterable[Tensor], eps: float = 1e-3,
               coords: int | None = None, seed: int = 0) -> float:
    """Max over input coordinates of |analytic - central difference| / max(1, |analytic|).

    ``coords`` limits the check to that many randomly chosen coordinates
    (drawn uniformly over all inputs); ``None`` checks all of them.
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    before = _stochastic_calls
    out = f(*inputs)
    if out.data.size != 1:
        raise ContractError("grad_check: f must be scalar-valued")
    if _stochastic_calls != before:
        raise ContractError("grad_check: f is stochastic (dropout active)")
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad for t in inputs]

    sizes = [t.data.size for t in inputs]
    flat = [(i, j) for i, n in enumerate(sizes) for j in range(n)]
    if coords is not None and coords < len(flat):
        rng = np.random.default_rng(seed)
        flat = [flat[k] for k in sorted(rng.choice(len(flat), size=coords, replace=False))]

    worst = 0.0
    with no_grad():
        for i, j in flat:
            view = inputs[i].data.reshape(-1)
            orig = view[j]
            view[j] = orig + eps
            fp = float(f(*inputs).data)
            view[j] = orig - eps
            fm = float(f(*inputs).data)
            view[j] = orig
            fd = (fp - fm) / (2 * eps)
            a = float(analytic[i].reshape(-1)[j])
            worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
    if _stochastic_calls != before:
        raise ContractError("grad_check: f is stochastic (dropout active)")
    return worst
