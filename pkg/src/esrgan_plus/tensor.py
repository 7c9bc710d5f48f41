"""Reverse-mode automatic differentiation over dense numpy arrays.

Graphs are recorded eagerly: every differentiable op that touches a tensor with
``requires_grad`` stores its parents and a closure mapping the upstream
gradient to parent gradients.  :func:`backward` walks that tape in reverse
topological order.  Gradients land on leaf tensors only and accumulate until
:meth:`Tensor.zero_grad` is called.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_grad_enabled = True
_check_finite = False


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


@contextlib.contextmanager
def detect_anomaly(enabled: bool = True):
    """Raise ``FloatingPointError`` as soon as any op produces NaN or Inf."""
    global _check_finite
    prev = _check_finite
    _check_finite = enabled
    try:
        yield
    finally:
        _check_finite = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor | None, ...] = ()
        self._backward: Callable | None = None
        self._op = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


class Parameter(Tensor):
    """A trainable leaf tensor carrying its hierarchical model name."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=DEFAULT_DTYPE), requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if _check_finite and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        # parents that do not require grad at build time never receive one
        out._parents = tuple(p if p.requires_grad else None for p in parents)
        out._backward = backward_fn
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent is not None and id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or parent is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# --------------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _make(x.data * factor, (x,), lambda g: (g * factor,), "scale")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in [0, 1), got {slope}")
    positive = x.data > 0
    out = np.where(positive, x.data, slope * x.data)
    return _make(out, (x,), lambda g: (np.where(positive, g, slope * g),), "leaky_relu")


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow for large |x|."""
    d = x.data
    out = np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d)))

    def _bw(g):
        e = np.exp(-np.abs(d))
        sig = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        return (g * sig,)

    return _make(out, (x,), _bw, "softplus")


# --------------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis``; every other dimension must agree."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty sequence")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            t.shape[d] != ref[d] for d in range(len(ref)) if d != axis
        ):
            raise ValueError(f"concat shape mismatch: {ref} vs {t.shape} along axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, _bw, "concat")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return _make(x.data.copy(), (x,), lambda g: (g,), "upsample_nearest")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def _bw(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _make(out, (x,), _bw, "upsample_nearest")


# --------------------------------------------------------------------- reductions


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = x.shape

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), _bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape
    count = x.data.size if axis is None else int(np.prod([src[a] for a in np.atleast_1d(axis)]))

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, src).copy(),)

    return _make(x.data.mean(axis=axis, keepdims=keepdims), (x,), _bw, "mean")


def l1_distance(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference over all elements."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"l1_distance shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    count = diff.size

    def _bw(g):
        s = np.sign(diff) * (g / count)
        return (s, -s)

    return _make(np.abs(diff).mean(), (a, b), _bw, "l1_distance")


# --------------------------------------------------------------------- layers


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patches as a (c*kh*kw, n*ho*wo) matrix; channel-major so GEMMs need no transposes."""
    n, c = xp.shape[:2]
    xt = np.ascontiguousarray(xp.transpose(1, 0, 2, 3))
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(c * kh * kw, n * ho * wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding, NCHW layout."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, ci, h, w = x.shape
    co, wci, kh, kw = weight.shape
    if ci != wci:
        raise ValueError(f"conv2d channel mismatch: input has {ci} channels, weight expects {wci}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d kernel must be odd-sized, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} / padding={padding}")
    if bias is not None and bias.shape != (co,):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match {co} output channels")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d input {h}x{w} too small for kernel {kh}x{kw} with padding {padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    hp, wp = xp.shape[2:]
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = weight.data.reshape(co, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(co, n, ho, wo).transpose(1, 0, 2, 3)

    def _bw(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(co, n * ho * wo)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(ci, kh, kw, n, ho, wo)
            gxt = np.zeros((ci, n, hp, wp), dtype=gcols.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, i, j]
            gx = gxt[:, :, padding : padding + h, padding : padding + w].transpose(1, 0, 2, 3)
            gx = np.ascontiguousarray(gx)
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(np.ascontiguousarray(out), parents, _bw, "conv2d")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map of (n, k) rows by a (o, k) weight."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def _bw(g):
        grads = (g @ weight.data, g.T @ x.data)
        return grads if bias is None else grads + (g.sum(axis=0),)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, _bw, "linear")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation with statistics of the current batch."""
    axes = (0, 2, 3)
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    g4 = gamma.data.reshape(1, -1, 1, 1)
    out = g4 * xhat + beta.data.reshape(1, -1, 1, 1)
    m = x.data.size // x.shape[1]

    def _bw(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * g4
        gx = inv / m * (m * gxhat - gxhat.sum(axis=axes, keepdims=True) - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), _bw, "batch_norm")


# --------------------------------------------------------------------- randomness


class RngState:
    """Seeded PCG64 stream; ``counter`` counts sampling calls."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        self.counter = 0
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, self.stream])))

    @property
    def generator(self) -> np.random.Generator:
        self.counter += 1
        return self._gen

    def normal(self, shape) -> np.ndarray:
        return self.generator.standard_normal(shape)

    def integers(self, low: int, high: int) -> int:
        return int(self.generator.integers(low, high))

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def random(self) -> float:
        return float(self.generator.random())

    def state_dict(self) -> dict:
        return {
            "seed": self.seed,
            "stream": self.stream,
            "counter": self.counter,
            "bit_generator": self._gen.bit_generator.state,
        }

    def load_state_dict(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self.stream = int(state["stream"])
        self.counter = int(state["counter"])
        self._gen.bit_generator.state = state["bit_generator"]


def normal_sample(rng: RngState, shape) -> Tensor:
    """I.i.d. standard normal draws; never part of the graph."""
    return Tensor(rng.normal(tuple(shape)))


# --------------------------------------------------------------------- optimisation


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Iterable[Parameter], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update; parameters without a gradient are skipped."""
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for p in params:
        if p.grad is None:
            continue
        g = p.grad
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        if m.shape != p.shape:
            raise ValueError(f"Adam moment shape {m.shape} does not match parameter {p.name} {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
