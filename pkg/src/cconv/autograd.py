"""Define-by-run reverse-mode differentiation.

Forward ops go through :func:`apply`, which evaluates the registered kernel
and, when a :class:`Tape` is active, records the call together with whatever
the backward rule needs. ``Tape.backward`` then walks the records in reverse.

Without an active tape ops simply evaluate, which is what inference uses.
"""
from __future__ import annotations

import contextlib
import contextvars
import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("active_tape", default=None)
_ids = itertools.count()


class TapeError(RuntimeError):
    pass


class Node:
    """A value flowing through the graph."""

    __slots__ = ("value", "id", "requires_grad")

    def __init__(self, value, requires_grad: bool = False):
        self.value = value
        self.id = next(_ids)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"{type(self).__name__}(shape={self.value.shape}, dtype={self.value.dtype})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(neg(self), _lift(other, self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


class Parameter(Node):
    """Learned tensor with an accumulated gradient of the same shape."""

    __slots__ = ("grad", "trainable")

    def __init__(self, value, trainable: bool = True):
        value = np.ascontiguousarray(value)
        super().__init__(value, requires_grad=trainable)
        self.trainable = trainable
        self.grad = np.zeros_like(value)

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def assign(self, value):
        value = np.asarray(value, dtype=self.value.dtype)
        if value.shape != self.value.shape:
            raise T.ShapeError(f"assign shape {value.shape} vs parameter {self.value.shape}")
        self.value = np.ascontiguousarray(value)
        if self.grad.dtype != self.value.dtype:
            self.grad = np.zeros_like(self.value)


@contextlib.contextmanager
def frozen(params):
    """Temporarily stop gradients into ``params`` (their values still flow forward)."""
    params = list(params)
    prev = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, r in zip(params, prev):
            p.requires_grad = r


def _lift(x, like: Node) -> Node:
    if isinstance(x, Node):
        return x
    return Node(np.asarray(x, dtype=like.dtype))


def constant(value) -> Node:
    return Node(np.asarray(value))


# -- op registry -------------------------------------------------------------

@dataclass(frozen=True)
class OpRule:
    name: str
    forward: Callable   # (*values, **attrs) -> (out, saved)
    backward: Callable  # (grad_out, saved, **attrs) -> tuple of input grads (None = no grad)
    masked: bool = False  # backward also takes needs=(bool per input) to skip unused grads


_RULES: dict[str, OpRule] = {}


def register(name: str, backward: Callable, masked: bool = False):
    def deco(forward):
        if name in _RULES:
            raise TapeError(f"op {name!r} registered twice")
        _RULES[name] = OpRule(name, forward, backward, masked)
        return forward
    return deco


def registered_ops() -> list[str]:
    return sorted(_RULES)


@dataclass
class Record:
    op: str
    inputs: tuple
    output: Node
    saved: object
    attrs: dict = field(default_factory=dict)


class Tape:
    """Ordered list of recorded ops for one forward pass."""

    def __init__(self):
        self.records: list[Record] = []
        self._produced: dict[int, int] = {}
        self._consumed: set[int] = set()
        self._token = None

    def __enter__(self):
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None

    def record(self, op: str, inputs, output: Node, saved, attrs) -> None:
        if op not in _RULES:
            raise TapeError(f"cannot record unregistered op {op!r}")
        pos = len(self.records)
        for inp in inputs:
            if self._produced.get(inp.id, -1) >= pos:
                raise TapeError(f"op {op!r} consumes a node produced later on the tape")
        if output.id in self._produced or output.id in self._consumed:
            raise TapeError(f"op {op!r} output is already on the tape (would break topological order)")
        self._consumed.update(i.id for i in inputs)
        self._produced[output.id] = pos
        self.records.append(Record(op, tuple(inputs), output, saved, attrs))

    def backward(self, loss: Node) -> dict[Parameter, np.ndarray]:
        """Accumulate d(loss)/d(param) into every reachable Parameter's ``grad``.

        Returns the per-call gradients keyed by parameter.
        """
        if loss.value.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
        params: dict[int, Parameter] = {}
        seen: set[int] = set()
        for pos in range(len(self.records) - 1, -1, -1):
            rec = self.records[pos]
            if rec.output.id in seen:
                raise TapeError("cycle detected: node produced twice on the tape")
            seen.add(rec.output.id)
            g = grads.pop(rec.output.id, None)
            if g is None:
                continue
            rule = _RULES[rec.op]
            if rule.masked:
                needs = tuple(i.requires_grad for i in rec.inputs)
                in_grads = rule.backward(g, rec.saved, needs=needs, **rec.attrs)
            else:
                in_grads = rule.backward(g, rec.saved, **rec.attrs)
            for inp, gi in zip(rec.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.id in seen:
                    raise TapeError("cycle detected: gradient flows into an already-processed node")
                if isinstance(inp, Parameter):
                    params[inp.id] = inp
                if inp.id in grads:
                    grads[inp.id] = grads[inp.id] + gi
                else:
                    grads[inp.id] = gi
        out = {}
        for pid, p in params.items():
            g = grads[pid].astype(p.value.dtype, copy=False).reshape(p.value.shape)
            p.grad = p.grad + g
            out[p] = g
        if isinstance(loss, Parameter) and loss.trainable:
            loss.grad = loss.grad + grads[loss.id]
            out[loss] = grads[loss.id]
        return out


def active_tape() -> Tape | None:
    return _active_tape.get()


def apply(op: str, *inputs: Node, **attrs) -> Node:
    rule = _RULES.get(op)
    if rule is None:
        raise TapeError(f"unregistered op {op!r}")
    out_value, saved = rule.forward(*(i.value for i in inputs), **attrs)
    tape = _active_tape.get()
    needs = tape is not None and any(i.requires_grad for i in inputs)
    out = Node(out_value, requires_grad=needs)
    if needs:
        tape.record(op, inputs, out, saved, attrs)
    return out


def backward(tape: Tape, loss: Node) -> dict[Parameter, np.ndarray]:
    return tape.backward(loss)


# -- helpers -----------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise -------------------------------------------------------------

def _add_fwd(a, b):
    return T.check_finite(a + b, "add"), (a.shape, b.shape)


register("add", lambda g, s: (_unbroadcast(g, s[0]), _unbroadcast(g, s[1])))(_add_fwd)


def add(a: Node, b: Node) -> Node:
    return apply("add", a, b)


@register("neg", lambda g, s: (-g,))
def _neg_fwd(a):
    return -a, None


def neg(a: Node) -> Node:
    return apply("neg", a)


def _mul_bwd(g, s):
    a, b = s
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


@register("mul", _mul_bwd)
def _mul_fwd(a, b):
    return T.check_finite(a * b, "mul"), (a, b)


def mul(a: Node, b: Node) -> Node:
    return apply("mul", a, b)


@register("scale", lambda g, s, c: (g * s,))
def _scale_fwd(a, c):
    c = a.dtype.type(c)
    return T.check_finite(a * c, "scale"), c


def scale(a: Node, c: float) -> Node:
    return apply("scale", a, c=float(c))


@register("add_scalar", lambda g, s, c: (g,))
def _add_scalar_fwd(a, c):
    return a + a.dtype.type(c), None


def add_scalar(a: Node, c: float) -> Node:
    return apply("add_scalar", a, c=float(c))


@register("relu", lambda g, mask: (g * mask,))
def _relu_fwd(a):
    return np.maximum(a, a.dtype.type(0)), a > 0


def relu(a: Node) -> Node:
    return apply("relu", a)


@register("tanh", lambda g, y: (g * (1 - y * y),))
def _tanh_fwd(a):
    y = np.tanh(a)
    return y, y


def tanh(a: Node) -> Node:
    return apply("tanh", a)


# -- reductions and shape ----------------------------------------------------

@register("sum", lambda g, s: (np.broadcast_to(g, s[0]).astype(s[1]),))
def _sum_fwd(a):
    return np.asarray(a.sum(dtype=np.float64), dtype=a.dtype).reshape(1), (a.shape, a.dtype)


def sum_all(a: Node) -> Node:
    return apply("sum", a)


@register("mean", lambda g, s: (np.broadcast_to(g / s[2], s[0]).astype(s[1]),))
def _mean_fwd(a):
    return np.asarray(a.mean(dtype=np.float64), dtype=a.dtype).reshape(1), (a.shape, a.dtype, a.size)


def mean(a: Node) -> Node:
    return apply("mean", a)


def _sum_axes_bwd(g, s, axes):
    shape = s
    keep = [1 if i in axes else n for i, n in enumerate(shape)]
    return (np.ascontiguousarray(np.broadcast_to(g.reshape(keep), shape)),)


@register("sum_axes", _sum_axes_bwd)
def _sum_axes_fwd(a, axes):
    return a.sum(axis=axes, dtype=np.float64).astype(a.dtype), a.shape


def sum_axes(a: Node, axes) -> Node:
    return apply("sum_axes", a, axes=tuple(axes))


@register("reshape", lambda g, s, shape: (g.reshape(s),))
def _reshape_fwd(a, shape):
    return a.reshape(shape), a.shape


def reshape(a: Node, shape) -> Node:
    return apply("reshape", a, shape=tuple(shape))


def _concat_bwd(g, s, axis):
    return tuple(np.split(g, np.cumsum(s)[:-1], axis=axis))


@register("concat", _concat_bwd)
def _concat_fwd(*xs, axis):
    return np.concatenate(xs, axis=axis), [x.shape[axis] for x in xs]


def concat(nodes, axis: int = 1) -> Node:
    return apply("concat", *nodes, axis=axis)


def _take_bwd(g, s, idx):
    out = np.zeros(s, dtype=g.dtype)
    np.add.at(out, idx, g)
    return (out,)


@register("take", _take_bwd)
def _take_fwd(a, idx):
    return np.ascontiguousarray(a[idx]), a.shape


def take(a: Node, idx) -> Node:
    """Rows ``a[idx]`` along axis 0; also serves as an embedding lookup."""
    return apply("take", a, idx=np.asarray(idx, dtype=np.intp))


def _scatter_bwd(g, s, index_sets, n):
    return tuple(np.ascontiguousarray(g[idx]) for idx in index_sets)


@register("scatter_rows", _scatter_bwd)
def _scatter_fwd(*parts, index_sets, n):
    out = np.empty((n,) + parts[0].shape[1:], dtype=parts[0].dtype)
    for p, idx in zip(parts, index_sets):
        out[idx] = p
    return out, None


def scatter_rows(parts, index_sets, n: int) -> Node:
    """Inverse of splitting a batch by ``take``: place each part at its row indices."""
    return apply("scatter_rows", *parts, index_sets=tuple(np.asarray(i, dtype=np.intp) for i in index_sets), n=n)


# -- linear algebra and image kernels ---------------------------------------

def _matmul_bwd(g, s, needs):
    a, b = s
    return (T.matmul(g, b.T) if needs[0] else None, T.matmul(a.T, g) if needs[1] else None)


@register("matmul", _matmul_bwd, masked=True)
def _matmul_fwd(a, b):
    return T.matmul(a, b), (a, b)


def matmul(a: Node, b: Node) -> Node:
    return apply("matmul", a, b)


def _conv_bwd(g, s, needs, stride, padding):
    x_shape, cols, w, has_bias = s
    dx, dw, db = T.conv2d_backward(g, x_shape, T.ConvWeights(w, stride, padding), cols,
                                   need_dx=needs[0], need_dw=needs[1])
    return (dx, dw, db) if has_bias else (dx, dw)


@register("conv2d", _conv_bwd, masked=True)
def _conv_fwd(x, w, b=None, *, stride, padding):
    out, cols = T.conv2d(x, T.ConvWeights(w, stride, padding), b, return_cols=True)
    return out, (x.shape, cols, w, b is not None)


def conv2d(x: Node, w: Node, b: Node | None = None, stride: int = 1, padding: int = 0) -> Node:
    ins = (x, w) if b is None else (x, w, b)
    return apply("conv2d", *ins, stride=stride, padding=padding)


@register("avg_pool2", lambda g, s: (T.avg_pool2_backward(g),))
def _pool_fwd(x):
    return T.avg_pool2(x), None


def avg_pool2(x: Node) -> Node:
    return apply("avg_pool2", x)


@register("upsample2", lambda g, s: (T.upsample_nearest2_backward(g),))
def _up_fwd(x):
    return T.upsample_nearest2(x), None


def upsample2(x: Node) -> Node:
    return apply("upsample2", x)


# -- normalization -----------------------------------------------------------

def _bn_bwd(g, s, **_):
    xhat, inv = s
    m = g.shape[0] * g.shape[2] * g.shape[3]
    dt = g.dtype
    mean_g = (g.sum(axis=(0, 2, 3), dtype=np.float64) / m).astype(dt)
    mean_gx = (np.einsum("nchw,nchw->c", g, xhat, dtype=np.float64) / m).astype(dt)
    dx = inv[None, :, None, None] * (g - mean_g[None, :, None, None] - xhat * mean_gx[None, :, None, None])
    return (dx,)


@register("batch_normalize", _bn_bwd)
def _bn_fwd(x, eps, moments=None):
    if moments is None:
        T.batch_moments(x)  # shape validation
        moments = T.batch_mean_var(x)
    mu, var = moments
    inv = 1.0 / np.sqrt(var + eps)
    dt = x.dtype
    xhat = (x - mu.astype(dt)[None, :, None, None]) * inv.astype(dt)[None, :, None, None]
    return T.check_finite(xhat, "batch_normalize"), (xhat, inv.astype(dt))


def batch_normalize(x: Node, eps: float, moments=None) -> Node:
    """(x - mu) / sqrt(var + eps) with batch moments; gradient flows through the moments.

    ``moments`` lets a caller that already computed ``batch_mean_var(x)`` pass it in.
    """
    return apply("batch_normalize", x, eps=float(eps), moments=moments)


def _affine_bwd(g, s):
    x, scale_, shape_s, shape_b = s
    sc = scale_.reshape(scale_.shape + (1, 1))
    dx = g * sc
    gx = (g * x).sum(axis=(2, 3), dtype=np.float64)
    gb = g.sum(axis=(2, 3), dtype=np.float64)
    return dx, _unbroadcast(gx, shape_s).astype(g.dtype), _unbroadcast(gb, shape_b).astype(g.dtype)


@register("channel_affine", _affine_bwd)
def _affine_fwd(x, sc, sh):
    # sc/sh are [C] or [N, C]; broadcast over spatial dims
    out = x * sc.reshape(sc.shape + (1, 1)) + sh.reshape(sh.shape + (1, 1))
    return T.check_finite(out, "channel_affine"), (x, sc, sc.shape, sh.shape)


def channel_affine(x: Node, sc: Node, sh: Node) -> Node:
    return apply("channel_affine", x, sc, sh)


# -- conditioning ------------------------------------------------------------

def _cw_bwd(g, s, cond):
    w, gamma_row, n_cond = s
    c_out, c_in = w.shape[:2]
    dw = g * gamma_row[:, None, None, None]
    dgamma = np.zeros((n_cond, c_out), dtype=g.dtype)
    dgamma[cond] = (g * w).sum(axis=(1, 2, 3), dtype=np.float64)
    dbeta = np.zeros((n_cond, c_in), dtype=g.dtype)
    dbeta[cond] = g.sum(axis=(0, 2, 3), dtype=np.float64) / c_out
    return dw, dgamma, dbeta


@register("condition_weights", _cw_bwd)
def _cw_fwd(w, gamma, beta, cond):
    c_out = w.shape[0]
    g = gamma[cond]
    fused = g[:, None, None, None] * w + (beta[cond] / w.dtype.type(c_out))[None, :, None, None]
    return T.check_finite(fused, "condition_weights"), (w, g, gamma.shape[0])


def condition_weights(w: Node, gamma: Node, beta: Node, cond: int) -> Node:
    """Fused cConv weights: gamma[s,i] * w[i,j] + beta[s,j] / C_out."""
    return apply("condition_weights", w, gamma, beta, cond=int(cond))


def _mw_bwd(g, s, cond):
    w, grow, brow, n_cond = s
    dw = g * grow[:, None, None, None] * brow[None, :, None, None]
    gw = g * w
    dgamma = np.zeros((n_cond, w.shape[0]), dtype=g.dtype)
    dgamma[cond] = (gw * brow[None, :, None, None]).sum(axis=(1, 2, 3))
    dbeta = np.zeros((n_cond, w.shape[1]), dtype=g.dtype)
    dbeta[cond] = (gw * grow[:, None, None, None]).sum(axis=(0, 2, 3))
    return dw, dgamma, dbeta


@register("multiplicative_weights", _mw_bwd)
def _mw_fwd(w, gamma, beta, cond):
    grow, brow = gamma[cond], beta[cond]
    fused = grow[:, None, None, None] * w * brow[None, :, None, None]
    return fused, (w, grow, brow, gamma.shape[0])


def multiplicative_weights(w: Node, gamma: Node, beta: Node, cond: int) -> Node:
    return apply("multiplicative_weights", w, gamma, beta, cond=int(cond))


def _sn_bwd(g, s, **_):
    wmat_shape, w, u, v, sigma = s
    wm = w.reshape(w.shape[0], -1)
    gm = g.reshape(wm.shape)
    # d(W/sigma) with sigma = u^T W v and u, v held constant
    dw = gm / sigma - (gm * wm).sum() / sigma ** 2 * np.outer(u, v)
    return (dw.reshape(w.shape).astype(g.dtype),)


@register("spectral_normalize", _sn_bwd)
def _sn_fwd(w, u, v):
    wm = w.reshape(w.shape[0], -1)
    sigma = float(u @ wm @ v)
    if sigma == 0.0 or not np.isfinite(sigma):
        raise T.NonFiniteError(f"spectral_normalize: degenerate sigma {sigma}")
    return (w / w.dtype.type(sigma)), (wm.shape, w, u, v, sigma)


def spectral_normalize(w: Node, u: np.ndarray, v: np.ndarray) -> Node:
    """W / (u^T W v) with the power-iteration vectors treated as constants."""
    return apply("spectral_normalize", w, u=u, v=v)


# -- losses ------------------------------------------------------------------

def _xent_bwd(g, s, **_):
    p, labels = s
    d = p.copy()
    d[np.arange(len(labels)), labels] -= 1.0
    return ((g.reshape(()) * d / len(labels)).astype(g.dtype),)


@register("softmax_xent", _xent_bwd)
def _xent_fwd(logits, labels):
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(len(labels)), labels].mean()
    return np.asarray([loss], dtype=logits.dtype), (np.exp(logp), labels)


def softmax_xent(logits: Node, labels) -> Node:
    """Mean cross-entropy of integer ``labels`` under softmax(logits)."""
    return apply("softmax_xent", logits, labels=np.asarray(labels, dtype=np.intp))


# -- gradient checking -------------------------------------------------------

def numerical_grad(f: Callable[[], float], p: Parameter, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every element of ``p``."""
    flat = p.value.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(p.value.shape)


def rel_error(analytic: np.ndarray, numeric: np.ndarray, atol: float = 0.0) -> float:
    """Max abs deviation scaled by the larger gradient magnitude (inf-norm relative error).

    Deviations up to ``atol`` (the finite-difference round-off floor) count as zero,
    so gradients that are exactly zero analytically do not fail on rounding noise.
    """
    diff = max(0.0, float(np.abs(analytic - numeric).max(initial=0.0)) - atol)
    if diff == 0.0:
        return 0.0
    scale_ = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    return float(diff / scale_)


def fd_noise_floor(loss_value: float, h: float) -> float:
    """Bound on central-difference round-off for a loss of this magnitude: ~16 ulp / h."""
    return 16.0 * np.finfo(np.float64).eps * (abs(loss_value) + 1.0) / h


def check_params(loss_fn: Callable[[], Node], params: dict[str, Parameter], h: float = 1e-5) -> dict[str, float]:
    """Compare tape gradients of ``loss_fn()`` against central differences for each named parameter."""
    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    if not np.isfinite(loss.value).all():
        raise T.NonFiniteError("gradcheck: loss is not finite")
    grads = tape.backward(loss)
    f0 = float(loss.value.reshape(()))

    def f():
        return float(loss_fn().value.reshape(()))

    report = {}
    for name, p in params.items():
        analytic = grads.get(p, np.zeros_like(p.value))
        report[name] = rel_error(analytic, numerical_grad(f, p, h), fd_noise_floor(f0, h))
    return report


def gradcheck(build_fn: Callable[..., Node], param_shapes, seed: int = 0, h: float = 1e-5) -> dict[str, float]:
    """Random float64 parameters of ``param_shapes`` fed to ``build_fn``; max relative error per parameter."""
    rng = np.random.default_rng(seed)
    if isinstance(param_shapes, dict):
        named = dict(param_shapes)
    else:
        named = {f"p{i}": s for i, s in enumerate(param_shapes)}
    params = {k: Parameter(rng.standard_normal(s)) for k, s in named.items()}
    if not params:
        return {}
    args = list(params.values())
    return check_params(lambda: build_fn(*args), params, h)
