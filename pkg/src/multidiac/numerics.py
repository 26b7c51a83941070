"""Dense tensors with reverse-mode automatic differentiation.

Everything the model needs runs through the `Tensor` class: matmul, add,
GELU, embedding lookup, softmax, layer norm, dropout, attention and time
pooling, each with an analytic backward. Storage is row-major float32 by
default (float64 available for verification work); reductions accumulate
in float64 before casting back.

Randomness comes exclusively from `RngStream`, a thin wrapper over numpy's
counter-based Philox generator. The (seed, stream) pair fully determines
the draw sequence, and `child()` derives independent sub-streams via a
splitmix64 hash, so any op that consumes randomness is a pure function of
its inputs plus the stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

_MASK64 = (1 << 64) - 1


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


@dataclass(frozen=True)
class RngStream:
    """Deterministic random stream: (seed, stream) -> fixed Philox sequence."""

    seed: int
    stream: int = 0

    def child(self, index: int) -> "RngStream":
        """Derive an independent sub-stream; same (self, index) -> same child."""
        mixed = _splitmix64((self.stream * 0x2545F4914F6CDD1D + index + 1) & _MASK64)
        return RngStream(self.seed, mixed)

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed & _MASK64, self.stream & _MASK64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))


class Tensor:
    """A dense float array plus optional gradient, node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=np.float32,
                 _parents=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self._parents = tuple(p for p in _parents if p.requires_grad)
        self._backward = _backward if self.requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad = self.grad + g.astype(self.data.dtype, copy=False)

    def backward(self):
        """Reverse-mode sweep from a scalar output."""
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic -----------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other, self.dtype)
        out = Tensor(self.data + other.data, _parents=(self, other))

        def bwd(g):
            self._accumulate(g)
            other._accumulate(g)
        out._backward = bwd if out.requires_grad else None
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, _parents=(self,))
        out._backward = (lambda g: self._accumulate(-g)) if out.requires_grad else None
        return out

    def __sub__(self, other):
        return self + (-_as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return _as_tensor(other, self.dtype) + (-self)

    def __mul__(self, other):
        other = _as_tensor(other, self.dtype)
        out = Tensor(self.data * other.data, _parents=(self, other))

        def bwd(g):
            self._accumulate(g * other.data)
            other._accumulate(g * self.data)
        out._backward = bwd if out.requires_grad else None
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return self * other ** -1.0
        return self * (1.0 / other)

    def __pow__(self, exponent: float):
        out = Tensor(self.data ** exponent, _parents=(self,))

        def bwd(g):
            self._accumulate(g * exponent * self.data ** (exponent - 1.0))
        out._backward = bwd if out.requires_grad else None
        return out

    def __matmul__(self, other):
        other = _as_tensor(other, self.dtype)
        out = Tensor(self.data @ other.data, _parents=(self, other))

        def bwd(g):
            self._accumulate(g @ np.swapaxes(other.data, -1, -2))
            other._accumulate(np.swapaxes(self.data, -1, -2) @ g)
        out._backward = bwd if out.requires_grad else None
        return out

    # -- shape ----------------------------------------------------------

    def reshape(self, *shape):
        out = Tensor(self.data.reshape(*shape), _parents=(self,))
        out._backward = (lambda g: self._accumulate(g.reshape(self.data.shape))) \
            if out.requires_grad else None
        return out

    def transpose(self, *axes):
        out = Tensor(self.data.transpose(*axes), _parents=(self,))
        inv = np.argsort(axes)
        out._backward = (lambda g: self._accumulate(g.transpose(*inv))) \
            if out.requires_grad else None
        return out

    # -- elementwise functions ------------------------------------------

    def exp(self):
        y = np.exp(self.data)
        out = Tensor(y, _parents=(self,))
        out._backward = (lambda g: self._accumulate(g * y)) if out.requires_grad else None
        return out

    def log(self):
        out = Tensor(np.log(self.data), _parents=(self,))
        out._backward = (lambda g: self._accumulate(g / self.data)) \
            if out.requires_grad else None
        return out

    def tanh(self):
        y = np.tanh(self.data)
        out = Tensor(y, _parents=(self,))
        out._backward = (lambda g: self._accumulate(g * (1.0 - y * y))) \
            if out.requires_grad else None
        return out

    def clamp_min(self, floor: float):
        mask = self.data >= floor
        out = Tensor(np.maximum(self.data, floor), _parents=(self,))
        out._backward = (lambda g: self._accumulate(g * mask)) \
            if out.requires_grad else None
        return out

    # -- reductions (float64 accumulation) ------------------------------

    def sum(self, axis=None, keepdims=False):
        y = np.sum(self.data, axis=axis, keepdims=keepdims, dtype=np.float64)
        out = Tensor(y.astype(self.dtype), _parents=(self,))

        def bwd(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.data.shape))
        out._backward = bwd if out.requires_grad else None
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum out the axes numpy broadcasting added or stretched."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, extent in enumerate(shape):
        if extent == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def tensor(data, requires_grad=False, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def zeros(shape, requires_grad=False, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


# -- neural-net primitives ----------------------------------------------

_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU; deterministic, used by both encoders."""
    d = x.data
    inner = _GELU_C * (d + 0.044715 * d ** 3)
    t = np.tanh(inner)
    out = Tensor(0.5 * d * (1.0 + t), _parents=(x,))

    def bwd(g):
        sech2 = 1.0 - t * t
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * d ** 2)
        x._accumulate(g * (0.5 * (1.0 + t) + 0.5 * d * sech2 * dinner))
    out._backward = bwd if out.requires_grad else None
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along `axis`; rejects non-finite input."""
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax input contains non-finite values")
    shifted = x.data.astype(np.float64) - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = (e / np.sum(e, axis=axis, keepdims=True)).astype(x.dtype)
    out = Tensor(p, _parents=(x,))

    def bwd(g):
        dot = np.sum(g * p, axis=axis, keepdims=True)
        x._accumulate(p * (g - dot))
    out._backward = bwd if out.requires_grad else None
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis; identical in train and eval (no stochastic state)."""
    if x.data.shape[-1] == 0:
        raise ShapeError("layer_norm over a zero-length last axis")
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(f"gamma/beta must have shape ({d},)")
    x64 = x.data.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    var = x64.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((x64 - mu) * inv).astype(x.dtype)
    out = Tensor(gamma.data * xhat + beta.data, _parents=(x, gamma, beta))

    def bwd(g):
        gg = g * gamma.data
        m1 = np.mean(gg, axis=-1, keepdims=True)
        m2 = np.mean(gg * xhat, axis=-1, keepdims=True)
        x._accumulate(((gg - m1 - xhat * m2) * inv).astype(x.dtype))
        axes = tuple(range(g.ndim - 1))
        gamma._accumulate(np.sum(g * xhat, axis=axes))
        beta._accumulate(np.sum(g, axis=axes))
    out._backward = bwd if out.requires_grad else None
    return out


def dropout(x: Tensor, p: float, training: bool, rng: RngStream) -> Tensor:
    """Inverted dropout: zero with prob p, survivors scaled 1/(1-p); eval = identity."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout p must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    mask = (rng.generator().random(x.data.shape) >= p) / (1.0 - p)
    return x * Tensor(mask.astype(x.dtype))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup with scatter-add backward; also serves as index_select."""
    ids = np.asarray(ids, dtype=np.int64)
    out = Tensor(table.data[ids], _parents=(table,))

    def bwd(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, ids, g)
        table._accumulate(acc)
    out._backward = bwd if out.requires_grad else None
    return out


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Bidirectional multi-head attention over (seq, dim) inputs."""
    s, d = q.data.shape
    if d % heads != 0:
        raise ConfigError(f"model dim {d} not divisible by {heads} heads")
    if k.data.shape != q.data.shape or v.data.shape != q.data.shape:
        raise ShapeError("q, k, v must share (seq, dim) shape")
    dh = d // heads

    def split(t):
        return t.reshape(s, heads, dh).transpose(1, 0, 2)

    qh, kh, vh = split(q), split(k), split(v)
    scores = (qh @ kh.transpose(0, 2, 1)) * (1.0 / math.sqrt(dh))
    attn = softmax(scores, axis=-1)
    out = attn @ vh
    return out.transpose(1, 0, 2).reshape(s, d)


def concat(tensors, axis: int = 0) -> Tensor:
    parts = list(tensors)
    out = Tensor(np.concatenate([t.data for t in parts], axis=axis),
                 _parents=tuple(parts))

    def bwd(g):
        offset = 0
        for t in parts:
            extent = t.data.shape[axis]
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + extent)
            t._accumulate(g[tuple(sl)])
            offset += extent
    out._backward = bwd if out.requires_grad else None
    return out


def mean_pool_time(x: Tensor, factor: int) -> Tensor:
    """Average consecutive groups of `factor` rows of a (frames, d) tensor."""
    frames, d = x.data.shape
    if frames % factor != 0:
        raise ShapeError(f"{frames} frames not divisible by pool factor {factor}")
    return x.reshape(frames // factor, factor, d).mean(axis=1)


def conv1d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 1) -> Tensor:
    """1-D convolution over (time, c_in) with weights (c_out, c_in, k)."""
    t_in, c_in = x.data.shape
    c_out, c_in_w, k = w.data.shape
    if c_in != c_in_w:
        raise ShapeError(f"conv1d channel mismatch: {c_in} vs {c_in_w}")
    xp = np.pad(x.data, ((padding, padding), (0, 0)))
    t_out = (t_in + 2 * padding - k) // stride + 1
    # im2col: (t_out, k*c_in)
    idx = (np.arange(t_out)[:, None] * stride + np.arange(k)[None, :])
    cols = xp[idx].reshape(t_out, k * c_in)
    wmat = w.data.transpose(2, 1, 0).reshape(k * c_in, c_out)
    out = Tensor(cols @ wmat + b.data, _parents=(x, w, b))

    def bwd(g):
        gw = cols.T @ g  # (k*c_in, c_out)
        w._accumulate(gw.reshape(k, c_in, c_out).transpose(2, 1, 0))
        b._accumulate(g.sum(axis=0))
        gcols = (g @ wmat.T).reshape(t_out, k, c_in)
        gxp = np.zeros_like(xp)
        np.add.at(gxp, idx, gcols)
        x._accumulate(gxp[padding:padding + t_in] if padding else gxp)
    out._backward = bwd if out.requires_grad else None
    return out


def grad_check(f, x: Tensor, h: float = 1e-4, max_coords: int | None = None,
               rng: RngStream | None = None) -> float:
    """Max relative error between reverse-mode grad of f and central differences.

    f must be a deterministic scalar-valued function of x. When max_coords is
    given, a deterministic random subset of coordinates is probed. Denominator
    is max(|analytic|, |numeric|, 1e-8).
    """
    if not (1e-4 <= h <= 1e-2):
        raise ConfigError(f"grad_check step h={h} outside [1e-4, 1e-2]")
    x.zero_grad()
    y = f(x)
    if not np.isfinite(y.data).all():
        raise NumericError("grad_check: f(x) is non-finite")
    y.backward()
    analytic = np.array(x.grad, dtype=np.float64)

    flat = x.data.reshape(-1)
    n = flat.size
    if max_coords is not None and max_coords < n:
        gen = (rng or RngStream(0)).generator()
        coords = gen.choice(n, size=max_coords, replace=False)
    else:
        coords = np.arange(n)

    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(f(x).data)
        flat[i] = orig - h
        f_minus = float(f(x).data)
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * h)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
