"""Dense float64 tensors with reverse-mode automatic differentiation.

Every primitive the network needs lives here: convolution, dense layers,
batch normalization, the two pooling families used by the attention
submodules, temporal max-pooling, and element-wise arithmetic with
size-1 broadcasting.

Each differentiable op creates an output ``Tensor`` that remembers its
parents, a backward closure and a monotonically increasing sequence
number. ``backward`` walks the reachable ops in descending sequence order,
which is exactly reverse execution order.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
BN_MOMENTUM = 0.1
BN_EPS = 1e-5

_seq = itertools.count()
_grad_enabled = True


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """Op parameters (stride, padding, kernel) do not yield a valid output."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


class GraphConsumedError(RuntimeError):
    """``backward`` called on a computation record that was already used."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_seq", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE, copy=True) if not isinstance(data, np.ndarray) else data.astype(DTYPE, copy=False)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._seq = next(_seq)
        self._op = ""
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; all routes go through the primitives below
    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_lift(other, self), -1.0))

    def __rsub__(self, other):
        return add(_lift(other, self), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self) -> Tensor:
        return total(self)

    def mean(self) -> Tensor:
        return scale(total(self), 1.0 / self.size)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full((1,) * like.ndim, float(x)))


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=requires_grad)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op}: non-finite values in output of shape {data.shape}")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    out._op = op
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        t.grad += g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every leaf with requires_grad.

    The graph behind ``loss`` is released afterwards; a second call raises.
    """
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphConsumedError("computation record already consumed by an earlier backward()")
    if not loss.requires_grad:
        raise GraphConsumedError("loss does not depend on any tensor that requires grad")

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes:
            continue
        nodes[id(t)] = t
        stack.extend(p for p in t._parents if p.requires_grad)

    order = sorted(nodes.values(), key=lambda t: t._seq, reverse=True)
    upstream: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in order:
        g = upstream.pop(id(t), None)
        if g is None:
            continue
        if t._backward is None:
            _accum(t, g)
            continue
        grads = t._backward(g)
        for p, pg in zip(t._parents, grads):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in upstream:
                upstream[id(p)] = upstream[id(p)] + pg
            else:
                upstream[id(p)] = pg

    for t in order:
        if t._backward is not None:
            t._backward = None
            t._parents = ()
            t._consumed = True


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    if len(a) != len(b):
        raise DimensionError(f"broadcast needs equal rank, got {a} and {b}")
    out = []
    for x, y in zip(a, b):
        if x == y or y == 1:
            out.append(x)
        elif x == 1:
            out.append(y)
        else:
            raise DimensionError(f"cannot broadcast {a} with {b}")
    return tuple(out)


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), bw, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def square(a: Tensor) -> Tensor:
    x = a.data
    return _make(x * x, (a,), lambda g: (2.0 * x * g,), "square")


def elementwise(fn: str, a: Tensor, b: Tensor | float | None = None) -> Tensor:
    """Dispatch by name: relu, sigmoid, add, mul, scale."""
    if fn == "relu":
        return relu(a)
    if fn == "sigmoid":
        return sigmoid(a)
    if fn == "add":
        return add(a, b)
    if fn == "mul":
        return mul(a, b)
    if fn == "scale":
        return scale(a, float(b))
    raise ValueError(f"unknown elementwise fn {fn!r}")


# ---------------------------------------------------------------- shape ops

def total(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


def index_select(a: Tensor, idx: np.ndarray) -> Tensor:
    """Rows ``idx`` along the leading axis."""
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), bw, "index_select")


# ---------------------------------------------------------------- dense / conv

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight laid out as F_out x F_in."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"dense: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"dense: bias {bias.shape} vs {weight.shape[0]} outputs")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gx = g @ wd
        gw = g.T @ xd
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, "dense")


def _normalize_padding(padding) -> tuple[tuple[int, int], tuple[int, int]]:
    ph, pw = padding
    if isinstance(ph, int):
        ph = (ph, ph)
    if isinstance(pw, int):
        pw = (pw, pw)
    return (int(ph[0]), int(ph[1])), (int(pw[0]), int(pw[1]))


def same_padding(k: int) -> tuple[int, int]:
    """(before, after) padding that keeps length for stride 1; extra goes after."""
    total_pad = k - 1
    return total_pad // 2, total_pad - total_pad // 2


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=(1, 1), padding=(0, 0)) -> Tensor:
    """Cross-correlation of an N x C_in x H x W input with C_out x C_in x kh x kw kernels.

    ``padding`` is ``(ph, pw)`` where each entry is an int (symmetric) or a
    ``(before, after)`` pair.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if cin != wcin:
        raise DimensionError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d: bias {bias.shape} vs {cout} filters")
    sh, sw = stride
    (pt, pb), (pl, pr) = _normalize_padding(padding)
    span_h = h + pt + pb - kh
    span_w = w + pl + pr - kw
    if span_h < 0 or span_w < 0 or span_h % sh or span_w % sw:
        raise ConfigurationError(
            f"conv2d: output size not a positive integer (H={h}, W={w}, kernel={kh}x{kw}, "
            f"stride={stride}, padding={padding})"
        )
    ho, wo = span_h // sh + 1, span_w // sw + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else x.data
    # N x C x ho x wo x kh x kw view, no copy until tensordot
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    wd = weight.data
    out = np.tensordot(win, wd, axes=([1, 4, 5], [1, 2, 3]))  # N x ho x wo x C_out
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g):
        # g: N x C_out x ho x wo
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # C_out x C x kh x kw
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(g, wd[:, :, i, j], axes=([1], [0]))  # N x ho x wo x C
                gxp[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += contrib.transpose(0, 3, 1, 2)
        gx = gxp[:, :, pt:pt + h, pl:pl + w]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw, "conv2d")


# ---------------------------------------------------------------- batch norm

class BatchNormState:
    """Running per-channel statistics, updated in place during training."""

    def __init__(self, channels: int):
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    mode: str = "train",
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"batchnorm expects N x C x H x W, got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm: gamma/beta must have shape ({c},)")
    g_ = gamma.data[None, :, None, None]
    b_ = beta.data[None, :, None, None]

    if mode == "eval":
        inv = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (x.data - state.running_mean[None, :, None, None]) * inv[None, :, None, None]

        def bw_eval(g):
            return g * g_ * inv[None, :, None, None], (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return _make(xhat * g_ + b_, (x, gamma, beta), bw_eval, "batchnorm")
    if mode != "train":
        raise ValueError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")

    m = n * h * w
    if m < 2:
        raise DimensionError("batchnorm in train mode needs at least 2 values per channel")
    mean = x.data.mean(axis=(0, 2, 3))
    var = x.data.var(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
    state.running_mean = (1 - momentum) * state.running_mean + momentum * mean
    state.running_var = (1 - momentum) * state.running_var + momentum * var * (m / (m - 1))

    def bw(g):
        dxhat = g * g_
        s1 = dxhat.mean(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        gx = (dxhat - s1 - xhat * s2) * inv[None, :, None, None]
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _make(xhat * g_ + b_, (x, gamma, beta), bw, "batchnorm")


# ---------------------------------------------------------------- pooling

def _first_argmax_mask(flat: np.ndarray) -> np.ndarray:
    """One-hot over the last axis marking the first maximal entry."""
    idx = flat.argmax(axis=-1)
    mask = np.zeros_like(flat)
    np.put_along_axis(mask, idx[..., None], 1.0, axis=-1)
    return mask


def pool_channelwise(x: Tensor, kind: str) -> Tensor:
    """Global avg/max over H and W per channel: N x C x H x W -> N x C."""
    if x.ndim != 4:
        raise DimensionError(f"pool_channelwise expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    if kind == "avg":
        return _make(flat.mean(axis=-1), (x,), lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),), "gap")
    if kind == "max":
        mask = _first_argmax_mask(flat)
        return _make(flat.max(axis=-1), (x,), lambda g: ((mask * g[:, :, None]).reshape(x.shape),), "gmp")
    raise ValueError(f"pool kind must be 'avg' or 'max', got {kind!r}")


def pool_across_channels(x: Tensor, kind: str) -> Tensor:
    """Avg/max over the channel axis: N x C x H x W -> N x 1 x H x W."""
    if x.ndim != 4:
        raise DimensionError(f"pool_across_channels expects 4-d input, got {x.shape}")
    c = x.shape[1]
    if kind == "avg":
        return _make(x.data.mean(axis=1, keepdims=True), (x,), lambda g: (np.broadcast_to(g / c, x.shape).copy(),), "cavg")
    if kind == "max":
        moved = np.moveaxis(x.data, 1, -1)
        mask = np.moveaxis(_first_argmax_mask(moved), -1, 1)
        return _make(x.data.max(axis=1, keepdims=True), (x,), lambda g: (mask * g,), "cmax")
    raise ValueError(f"pool kind must be 'avg' or 'max', got {kind!r}")


def max_pool_temporal(x: Tensor, extent: int) -> Tensor:
    """Non-overlapping max-pool along W; a trailing remainder shorter than ``extent`` is dropped."""
    n, c, h, w = x.shape
    wo = w // extent
    if wo < 1:
        raise ConfigurationError(f"temporal max-pool of extent {extent} on width {w}")
    blocks = x.data[..., : wo * extent].reshape(n, c, h, wo, extent)
    mask = _first_argmax_mask(blocks)

    def bw(g):
        gx = np.zeros(x.shape)
        gx[..., : wo * extent] = (mask * g[..., None]).reshape(n, c, h, wo * extent)
        return (gx,)

    return _make(blocks.max(axis=-1), (x,), bw, "maxpool_t")


# ---------------------------------------------------------------- losses

def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * g.sum(axis=1, keepdims=True),), "log_softmax")


def pick(x: Tensor, labels: np.ndarray) -> Tensor:
    """``x[i, labels[i]]`` for each row."""
    rows = np.arange(x.shape[0])

    def bw(g):
        gx = np.zeros(x.shape)
        gx[rows, labels] = g
        return (gx,)

    return _make(x.data[rows, labels], (x,), bw, "pick")


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
