"""Dense float64 tensors with reverse-mode differentiation and Adam.

Tensors are immutable values: the wrapped array is marked read-only and
every operation allocates a fresh output, so tensors are safe to share
across threads. Each operation records its parents and a gradient
closure on the output; ``backward`` replays those records once each in
reverse topological order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DegenerateInputError, DimensionError

__all__ = [
    "Tensor",
    "AdamState",
    "adam_step",
    "matmul",
    "softmax",
    "logsumexp",
    "layer_norm",
    "l2_normalize",
    "concat",
    "uniform_init",
    "save_tensor",
    "load_tensor",
    "tensor_to_bytes",
    "tensor_from_bytes",
]


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def _ensure_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{op} produced non-finite values")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """n-dimensional float64 array with an optional gradient record."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _ensure_finite(arr, "Tensor")
        self.data = _freeze(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn = None

    # -- construction -------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents, grad_fn, op: str) -> "Tensor":
        out = cls.__new__(cls)
        arr = np.asarray(data, dtype=np.float64)
        _ensure_finite(arr, op)
        out.data = _freeze(arr)
        out.grad = None
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._grad_fn = grad_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._grad_fn = None
        return out

    @classmethod
    def zeros(cls, *shape: int) -> "Tensor":
        return cls(np.zeros(shape))

    @classmethod
    def ones(cls, *shape: int) -> "Tensor":
        return cls(np.ones(shape))

    # -- bookkeeping ---------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _bad_item(self)

    def to_numpy(self) -> np.ndarray:
        return np.array(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- elementwise arithmetic ----------------------------------------

    @staticmethod
    def _coerce(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    def __add__(self, other):
        other = self._coerce(other)
        out = self.data + other.data
        a_shape, b_shape = self.shape, other.shape
        return Tensor._from_op(
            out,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
            "add",
        )

    __radd__ = __add__

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __mul__(self, other):
        other = self._coerce(other)
        a, b = self.data, other.data
        return Tensor._from_op(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        a, b = self.data, other.data
        out = a / b
        return Tensor._from_op(
            out,
            (self, other),
            lambda g: (
                _unbroadcast(g / b, a.shape),
                _unbroadcast(-g * a / (b * b), b.shape),
            ),
            "div",
        )

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __pow__(self, k):
        if not isinstance(k, (int, float)):
            raise ContractError("pow exponent must be a Python scalar")
        x = self.data
        out = x**k
        return Tensor._from_op(out, (self,), lambda g: (g * k * x ** (k - 1),), "pow")

    def __matmul__(self, other):
        return matmul(self, other)

    # -- unary math ----------------------------------------------------

    def exp(self):
        y = np.exp(self.data)
        return Tensor._from_op(y, (self,), lambda g: (g * y,), "exp")

    def log(self):
        if np.any(self.data <= 0.0):
            raise ContractError("log requires strictly positive input")
        x = self.data
        return Tensor._from_op(np.log(x), (self,), lambda g: (g / x,), "log")

    def sqrt(self):
        if np.any(self.data < 0.0):
            raise ContractError("sqrt requires nonnegative input")
        y = np.sqrt(self.data)
        return Tensor._from_op(y, (self,), lambda g: (g * 0.5 / y,), "sqrt")

    def tanh(self):
        y = np.tanh(self.data)
        return Tensor._from_op(y, (self,), lambda g: (g * (1.0 - y * y),), "tanh")

    def sigmoid(self):
        # split by sign for stability
        x = self.data
        y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return Tensor._from_op(y, (self,), lambda g: (g * y * (1.0 - y),), "sigmoid")

    def relu(self):
        x = self.data
        mask = x > 0
        return Tensor._from_op(np.where(mask, x, 0.0), (self,), lambda g: (g * mask,), "relu")

    def leaky_relu(self, negative_slope: float = 0.01):
        x = self.data
        slope = np.where(x > 0, 1.0, negative_slope)
        return Tensor._from_op(x * slope, (self,), lambda g: (g * slope,), "leaky_relu")

    def gelu(self):
        """tanh-form GELU."""
        c = np.sqrt(2.0 / np.pi)
        x = self
        return 0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())

    # -- reductions ----------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        x = self.data
        out = x.sum(axis=axis, keepdims=keepdims)

        def grad_fn(g):
            if axis is None:
                return (np.broadcast_to(g, x.shape).copy(),)
            gx = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gx, x.shape).copy(),)

        return Tensor._from_op(out, (self,), grad_fn, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        count = self.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) / float(count)

    def max(self, axis=None, keepdims: bool = False):
        """Max reduction; the gradient routes to the first maximal element."""
        x = self.data
        if axis is None:
            out = x.max()
            idx = np.unravel_index(np.argmax(x), x.shape)

            def grad_fn(g):
                gx = np.zeros_like(x)
                gx[idx] = g
                return (gx,)

            return Tensor._from_op(out, (self,), grad_fn, "max")

        out = x.max(axis=axis, keepdims=keepdims)
        arg = np.expand_dims(np.argmax(x, axis=axis), axis)

        def grad_fn(g):
            gx = np.zeros_like(x)
            gexp = g if keepdims else np.expand_dims(g, axis)
            np.put_along_axis(gx, arg, gexp, axis)
            return (gx,)

        return Tensor._from_op(out, (self,), grad_fn, "max")

    def maximum(self, other):
        """Elementwise max; at ties the gradient routes to ``self``."""
        other = self._coerce(other)
        a, b = self.data, other.data
        mask = a >= b
        return Tensor._from_op(
            np.where(mask, a, b),
            (self, other),
            lambda g: (_unbroadcast(g * mask, a.shape), _unbroadcast(g * ~mask, b.shape)),
            "maximum",
        )

    def minimum(self, other):
        other = self._coerce(other)
        a, b = self.data, other.data
        mask = a <= b
        return Tensor._from_op(
            np.where(mask, a, b),
            (self, other),
            lambda g: (_unbroadcast(g * mask, a.shape), _unbroadcast(g * ~mask, b.shape)),
            "minimum",
        )

    # -- shape manipulation ---------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError as exc:
            raise DimensionError(f"cannot reshape {src} to {shape}") from exc
        return Tensor._from_op(out, (self,), lambda g: (g.reshape(src),), "reshape")

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        out = self.data.transpose(axes)
        return Tensor._from_op(out, (self,), lambda g: (g.transpose(inv),), "transpose")

    def broadcast_to(self, shape):
        src = self.shape
        out = np.broadcast_to(self.data, shape)
        return Tensor._from_op(np.array(out), (self,), lambda g: (_unbroadcast(g, src),), "broadcast_to")

    def __getitem__(self, key):
        x = self.data
        out = x[key]

        def grad_fn(g):
            gx = np.zeros_like(x)
            if isinstance(key, np.ndarray) and key.dtype.kind in "iu":
                np.add.at(gx, key, g)
            else:
                gx[key] += g
            return (gx,)

        return Tensor._from_op(np.array(out), (self,), grad_fn, "getitem")

    def pad(self, widths):
        """Zero-pad; ``widths`` is a per-axis list of (before, after)."""
        src = self.shape
        out = np.pad(self.data, widths)
        slices = tuple(slice(b, b + n) for (b, _), n in zip(widths, src))
        return Tensor._from_op(out, (self,), lambda g: (g[slices],), "pad")

    # -- autodiff --------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(node) into ``grad`` for every node that
        requires gradients. ``self`` must be a scalar (size 1)."""
        if self.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {self.shape}")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g
            if node._grad_fn is None:
                continue
            for parent, pg in zip(node._parents, node._grad_fn(g)):
                if not parent.requires_grad:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg


def _bad_item(t: Tensor):
    raise ContractError(f"item() on non-scalar tensor of shape {t.shape}")


# -- free functions ------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Accepts stacked operands (leading batch axes
    broadcast); the trailing two axes must contract as m x k @ k x n."""
    a = Tensor._coerce(a)
    b = Tensor._coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def grad_fn(g):
        ga = _unbroadcast(g @ bd.swapaxes(-1, -2), ad.shape)
        gb = _unbroadcast(ad.swapaxes(-1, -2) @ g, bd.shape)
        return ga, gb

    return Tensor._from_op(out, (a, b), grad_fn, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along ``axis`` (max-subtracted)."""
    x = Tensor._coerce(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return Tensor._from_op(y, (x,), grad_fn, "softmax")


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Stable log-sum-exp along ``axis``; gradient is the softmax."""
    x = Tensor._coerce(x)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    soft = e / s
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def grad_fn(g):
        gexp = g if keepdims else np.expand_dims(g, axis)
        return (gexp * soft,)

    return Tensor._from_op(out, (x,), grad_fn, "logsumexp")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis, then apply the affine (gain, bias).

    ``eps >= 0``; with eps = 0 a zero-variance row raises (division by
    zero trips the finiteness guard).
    """
    if eps < 0:
        raise ContractError("layer_norm eps must be >= 0")
    x = Tensor._coerce(x)
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    normed = centered / (var + eps).sqrt()
    return normed * Tensor._coerce(gain) + Tensor._coerce(bias)


def l2_normalize(x: Tensor) -> Tensor:
    """Scale rows (last axis) to unit Euclidean norm."""
    x = Tensor._coerce(x)
    sq = (x * x).sum(axis=-1, keepdims=True)
    if np.any(sq.data == 0.0):
        raise DegenerateInputError("cannot l2-normalize a zero vector")
    return x / sq.sqrt()


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [Tensor._coerce(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def grad_fn(g):
        return tuple(
            np.array(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis))
            for i in range(len(ts))
        )

    return Tensor._from_op(out, tuple(ts), grad_fn, "concat")


def uniform_init(shape, fan_in: int, rng: np.random.Generator, requires_grad: bool = True) -> Tensor:
    """Seeded uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) parameter."""
    bound = 1.0 / np.sqrt(float(fan_in))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=requires_grad)


# -- Adam ------------------------------------------------------------------


@dataclass
class AdamState:
    """Bias-corrected Adam moments for a named parameter set."""

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict, lr: float = 3e-4, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        state = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(params: dict, grads: dict, state: AdamState) -> tuple[dict, AdamState]:
    """One deterministic Adam update. Pure: returns fresh params and state."""
    t = state.step + 1
    new_params: dict = {}
    new_state = AdamState(lr=state.lr, beta1=state.beta1, beta2=state.beta2,
                          eps=state.eps, step=t)
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise DimensionError(
                f"gradient shape {g.shape} does not match parameter '{name}' shape {p.data.shape}"
            )
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        new_data = p.data - state.lr * mhat / (np.sqrt(vhat) + state.eps)
        new_state.m[name] = m
        new_state.v[name] = v
        new_params[name] = Tensor(new_data, requires_grad=p.requires_grad)
    return new_params, new_state


# -- serialization ---------------------------------------------------------

_HEADER_U64 = struct.Struct("<Q")


def tensor_to_bytes(t: Tensor) -> bytes:
    """Flat little-endian encoding: rank, dims (u64 each), f64 payload."""
    parts = [_HEADER_U64.pack(t.ndim)]
    parts.extend(_HEADER_U64.pack(d) for d in t.shape)
    parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return b"".join(parts)


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Decode one tensor; returns (tensor, next offset)."""
    (rank,) = _HEADER_U64.unpack_from(buf, offset)
    offset += 8
    dims = []
    for _ in range(rank):
        (d,) = _HEADER_U64.unpack_from(buf, offset)
        dims.append(int(d))
        offset += 8
    count = int(np.prod(dims)) if dims else 1
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).reshape(dims)
    offset += count * 8
    return Tensor(np.array(data)), offset


def save_tensor(t: Tensor, path) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        buf = fh.read()
    t, _ = tensor_from_bytes(buf)
    return t
