"""Conditioning layers and network blocks.

Condition labels are dense integer indices ``0..N-1``; batched layers take a
label per batch element.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autograd as ag
from . import tensor as T
from .autograd import Node, Parameter

EPS = 1e-5
MOMENTUM = 0.1


class Module:
    """Minimal parameter container with stable dotted paths."""

    training = True
    _buffers: tuple = ()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, val in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(val, Parameter):
                yield path, val
            elif isinstance(val, Module):
                yield from val.named_parameters(path + ".")
            elif isinstance(val, (list, tuple)):
                for i, m in enumerate(val):
                    if isinstance(m, Module):
                        yield from m.named_parameters(f"{path}{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for m in val:
                    if isinstance(m, Module):
                        yield from m.modules()

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            val = getattr(self, name)
            if val is not None:
                yield f"{prefix}{name}", val
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, m in enumerate(val):
                    if isinstance(m, Module):
                        yield from m.named_buffers(f"{prefix}{name}{i}.")

    def state(self) -> dict[str, np.ndarray]:
        out = {k: p.value for k, p in self.named_parameters()}
        out.update(self.named_buffers())
        return out

    def load_state(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        for k, p in self.named_parameters():
            p.assign(state[prefix + k])
        for m_path, m in self._named_modules():
            for name in m._buffers:
                key = f"{prefix}{m_path}{name}"
                if key in state:
                    setattr(m, name, np.array(state[key]))

    def _named_modules(self, prefix: str = ""):
        yield prefix, self
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield from val._named_modules(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, m in enumerate(val):
                    if isinstance(m, Module):
                        yield from m._named_modules(f"{prefix}{name}{i}.")

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def to(self, dtype):
        for p in self.parameters():
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)
        for _, m in self._named_modules():
            for name in m._buffers:
                val = getattr(m, name)
                if val is not None and val.dtype.kind == "f":
                    setattr(m, name, val.astype(dtype))
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def _he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _labels(labels, n: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp).reshape(-1)
    if labels.size == 1 and n > 1:
        labels = np.full(n, labels[0], dtype=np.intp)
    if labels.size != n:
        raise T.ShapeError(f"got {labels.size} labels for batch of {n}")
    return labels


# -- convolutions ------------------------------------------------------------

class Conv2d(Module):
    def __init__(self, c_in, c_out, k=3, stride=1, padding=None, bias=True, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = Parameter(_he_normal(rng, (c_out, c_in, k, k), k * k * c_in, dtype))
        self.bias = Parameter(np.zeros(c_out, dtype)) if bias else None

    @property
    def conv_weights(self) -> T.ConvWeights:
        return T.ConvWeights(self.weight.value.copy(), self.stride, self.padding)

    def forward(self, x: Node) -> Node:
        return ag.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConditionTable(Module):
    """Per-condition filter-wise scales (gamma) and channel-wise shifts (beta)."""

    def __init__(self, n_cond, c_in, c_out, dtype=np.float32):
        self.gamma = Parameter(np.ones((n_cond, c_out), dtype))
        self.beta = Parameter(np.zeros((n_cond, c_in), dtype))

    @property
    def n_cond(self) -> int:
        return self.gamma.value.shape[0]

    @property
    def n_params(self) -> int:
        return self.gamma.value.size + self.beta.value.size


class CConv2d(Module):
    """Conditional convolution: per-condition weights built from one shared filter bank.

    ``multiplicative=True`` switches to the scale-scale variant, kept only to
    demonstrate why it degenerates.
    """

    def __init__(self, c_in, c_out, n_cond, k=3, stride=1, padding=None, bias=True,
                 rng=None, dtype=np.float32, multiplicative=False):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.multiplicative = multiplicative
        self.weight = Parameter(_he_normal(rng, (c_out, c_in, k, k), k * k * c_in, dtype))
        self.table = ConditionTable(n_cond, c_in, c_out, dtype)
        if multiplicative:
            self.table.beta.assign(np.ones_like(self.table.beta.value))
        self.bias = Parameter(np.zeros(c_out, dtype)) if bias else None
        self.morph = None  # (s1, s2, t) overrides label lookup when set

    @property
    def c_in(self):
        return self.weight.value.shape[1]

    @property
    def c_out(self):
        return self.weight.value.shape[0]

    @property
    def n_cond(self):
        return self.table.n_cond

    def _fused(self, s: int) -> Node:
        if not 0 <= s < self.n_cond:
            raise IndexError(f"condition {s} out of range [0, {self.n_cond})")
        fn = ag.multiplicative_weights if self.multiplicative else ag.condition_weights
        return fn(self.weight, self.table.gamma, self.table.beta, s)

    def _morphed(self) -> Node:
        s1, s2, t = self.morph
        for s in (s1, s2):
            if not 0 <= s < self.n_cond:
                raise IndexError(f"condition {s} out of range [0, {self.n_cond})")
        g, b = self.table.gamma.value, self.table.beta.value
        # a + t(b - a) in double: exact at t=0, t=1 and when a == b
        g1, b1 = g[s1].astype(np.float64), b[s1].astype(np.float64)
        gamma = g1 + t * (g[s2] - g1)
        beta = b1 + t * (b[s2] - b1)
        dt = self.weight.value.dtype
        table_g = Node(gamma.astype(dt)[None])
        table_b = Node(beta.astype(dt)[None])
        fn = ag.multiplicative_weights if self.multiplicative else ag.condition_weights
        return fn(self.weight, table_g, table_b, 0)

    def forward(self, x: Node, labels) -> Node:
        n = x.shape[0]
        if self.morph is not None:
            return ag.conv2d(x, self._morphed(), self.bias, self.stride, self.padding)
        labels = _labels(labels, n)
        groups = np.unique(labels)
        if len(groups) == 1:
            return ag.conv2d(x, self._fused(int(groups[0])), self.bias, self.stride, self.padding)
        parts, index_sets = [], []
        for s in groups:
            idx = np.flatnonzero(labels == s)
            parts.append(ag.conv2d(ag.take(x, idx), self._fused(int(s)), self.bias, self.stride, self.padding))
            index_sets.append(idx)
        return ag.scatter_rows(parts, index_sets, n)


def condition_weights(layer: CConv2d, s: int) -> T.ConvWeights:
    """W^s for condition ``s`` as a plain filter bank."""
    return T.ConvWeights(layer._fused(s).value.copy(), layer.stride, layer.padding)


def multiplicative_variant_weights(layer: CConv2d, s: int) -> T.ConvWeights:
    if not 0 <= s < layer.n_cond:
        raise IndexError(f"condition {s} out of range [0, {layer.n_cond})")
    w = ag.multiplicative_weights(layer.weight, layer.table.gamma, layer.table.beta, s)
    return T.ConvWeights(w.value.copy(), layer.stride, layer.padding)


def cconv_forward(layer: CConv2d, x: np.ndarray, s: int) -> np.ndarray:
    return layer.forward(Node(x), np.full(x.shape[0], s)).value


def cconv_terms(layer: CConv2d, x: np.ndarray, s: int) -> tuple[np.ndarray, np.ndarray]:
    """The two additive pieces of a cConv output, each from its own convolution.

    Returns (x conv gamma_s*W, x conv B_s) where B_s repeats beta_s / C_out over
    every filter and spatial tap. Bias is excluded from both.
    """
    w = layer.weight.value
    gamma = layer.table.gamma.value[s]
    beta = layer.table.beta.value[s]
    scaled = T.ConvWeights(gamma[:, None, None, None] * w, layer.stride, layer.padding)
    shift = np.broadcast_to((beta / w.dtype.type(layer.c_out))[None, :, None, None], w.shape).copy()
    return (T.conv2d(x, scaled), T.conv2d(x, T.ConvWeights(shift, layer.stride, layer.padding)))


# -- normalization -----------------------------------------------------------

class BatchNorm2d(Module):
    """Batch normalization with shared (unconditional) scale theta and shift delta."""

    _buffers = ("running_mean", "running_var")

    def __init__(self, c, eps=EPS, momentum=MOMENTUM, dtype=np.float32):
        self.eps = eps
        self.momentum = momentum
        self.theta = Parameter(np.ones(c, dtype))
        self.delta = Parameter(np.zeros(c, dtype))
        self.running_mean = None
        self.running_var = None

    def normalize(self, x: Node) -> Node:
        if self.training:
            n, _, h, w = x.shape
            if n * h * w < 2:
                raise T.ShapeError(f"batch norm needs >= 2 values per channel, got {x.shape}")
            mu, var = T.batch_mean_var(x.value)
            xhat = ag.batch_normalize(x, self.eps, moments=(mu, var))
            if self.running_mean is None:
                self.running_mean = mu.astype(x.dtype)
                self.running_var = var.astype(x.dtype)
            else:
                m = self.momentum
                self.running_mean = ((1 - m) * self.running_mean + m * mu).astype(x.dtype)
                self.running_var = ((1 - m) * self.running_var + m * var).astype(x.dtype)
            return xhat
        if self.running_mean is None:
            raise RuntimeError("batch norm used in eval mode before any training-mode call")
        inv = 1.0 / np.sqrt(self.running_var.astype(np.float64) + self.eps)
        sc = Node(inv.astype(x.dtype))
        sh = Node((-self.running_mean * inv).astype(x.dtype))
        return ag.channel_affine(x, sc, sh)

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        """Frozen (mu, sqrt(var + eps)) used in eval mode."""
        if self.running_mean is None:
            raise RuntimeError("no running moments yet")
        return (self.running_mean.astype(np.float64),
                np.sqrt(self.running_var.astype(np.float64) + self.eps))

    def forward(self, x: Node, labels=None) -> Node:
        return ag.channel_affine(self.normalize(x), self.theta, self.delta)


class CondBatchNorm2d(BatchNorm2d):
    """Batch normalization whose scale/shift rows are selected by the condition."""

    def __init__(self, c, n_cond, eps=EPS, momentum=MOMENTUM, dtype=np.float32):
        super().__init__(c, eps, momentum, dtype)
        self.theta = Parameter(np.ones((n_cond, c), dtype))
        self.delta = Parameter(np.zeros((n_cond, c), dtype))

    @property
    def n_cond(self):
        return self.theta.value.shape[0]

    def forward(self, x: Node, labels=None) -> Node:
        labels = _labels(labels, x.shape[0])
        if labels.min() < 0 or labels.max() >= self.n_cond:
            raise IndexError(f"condition out of range [0, {self.n_cond})")
        xhat = self.normalize(x)
        return ag.channel_affine(xhat, ag.take(self.theta, labels), ag.take(self.delta, labels))


def cbn_forward(layer: CondBatchNorm2d, x: np.ndarray, s: int, training: bool) -> np.ndarray:
    layer.train(training)
    return layer.forward(Node(x), np.full(x.shape[0], s)).value


def normalized_form_identity_check(stack, x: np.ndarray, s: int) -> float:
    """Max abs gap between a conv+norm stack and its affine rewrite in the raw conv output.

    ``stack`` is ``(Conv2d, CondBatchNorm2d)`` or ``(CConv2d, BatchNorm2d)``;
    the norm layer must be in eval mode so its moments are constants.
    """
    conv, norm = stack
    if norm.training:
        raise RuntimeError("identity only holds with frozen moments; call .eval() first")
    labels = np.full(x.shape[0], s)
    xn = Node(x)
    if isinstance(conv, CConv2d):
        direct = norm.forward(conv.forward(xn, labels)).value
    else:
        direct = norm.forward(conv.forward(xn), labels).value
    mu, sigma = norm.moments()
    dt = x.dtype
    bias = conv.bias.value.astype(np.float64) if conv.bias is not None else 0.0
    plain = T.conv2d(x, T.ConvWeights(conv.weight.value.copy(), conv.stride, conv.padding)).astype(np.float64)
    if isinstance(norm, CondBatchNorm2d) and not isinstance(conv, CConv2d):
        theta_s = norm.theta.value[s].astype(np.float64)
        delta_s = norm.delta.value[s].astype(np.float64)
        theta_hat = theta_s / sigma
        delta_hat = delta_s - (mu - bias) * theta_s / sigma
        rewritten = theta_hat[None, :, None, None] * plain + delta_hat[None, :, None, None]
    elif isinstance(conv, CConv2d) and type(norm) is BatchNorm2d:
        theta = norm.theta.value.astype(np.float64)
        delta = norm.delta.value.astype(np.float64)
        gamma_s = conv.table.gamma.value[s].astype(np.float64)
        _, proj = cconv_terms(conv, x, s)
        gamma_hat = theta * gamma_s / sigma
        theta_hat = theta / sigma
        delta_hat = delta - (mu - bias) * theta / sigma
        rewritten = (gamma_hat[None, :, None, None] * plain
                     + theta_hat[None, :, None, None] * proj.astype(np.float64)
                     + delta_hat[None, :, None, None])
    else:
        raise TypeError("stack must be (Conv2d, CondBatchNorm2d) or (CConv2d, BatchNorm2d)")
    return float(np.abs(direct.astype(np.float64) - rewritten.astype(dt).astype(np.float64)).max())


# -- spectral normalization --------------------------------------------------

def _unit(v):
    n = np.linalg.norm(v)
    if n == 0.0:
        raise T.NonFiniteError("spectral norm: zero vector in power iteration")
    return v / n


class SpectralNorm(Module):
    """Divides a weight by a persistent power-iteration estimate of its top singular value."""

    _buffers = ("u", "v")

    def __init__(self, weight: Parameter, power_iters: int = 1, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = weight
        self.power_iters = power_iters
        wm = self._matrix()
        self.u = _unit(rng.standard_normal(wm.shape[0]))
        self.v = _unit(wm.T @ self.u)

    def _matrix(self) -> np.ndarray:
        w = self.weight.value.astype(np.float64)
        return w.reshape(w.shape[0], -1)

    def power_iteration(self, iters: int | None = None) -> float:
        wm = self._matrix()
        if not np.any(wm):
            raise T.NonFiniteError("spectral norm of an all-zero weight")
        for _ in range(self.power_iters if iters is None else iters):
            self.v = _unit(wm.T @ self.u)
            self.u = _unit(wm @ self.v)
        return self.sigma()

    def sigma(self) -> float:
        return float(self.u @ self._matrix() @ self.v)

    def forward(self) -> Node:
        if self.training:
            self.power_iteration()
        return ag.spectral_normalize(self.weight, self.u, self.v)


def spectral_normalize(wrapper: SpectralNorm, iters: int | None = None) -> np.ndarray:
    """Run ``iters`` power-iteration steps (default: the wrapper's setting) and return W / sigma."""
    wrapper.power_iteration(iters)
    return ag.spectral_normalize(wrapper.weight, wrapper.u, wrapper.v).value


def estimate_sigma(w: np.ndarray, iters: int = 20, seed: int = 0) -> float:
    wm = np.asarray(w, dtype=np.float64).reshape(w.shape[0], -1)
    u = _unit(np.random.default_rng(seed).standard_normal(wm.shape[0]))
    v = _unit(wm.T @ u)
    for _ in range(iters):
        v = _unit(wm.T @ u)
        u = _unit(wm @ v)
    return float(u @ wm @ v)


class SNConv2d(Conv2d):
    def __init__(self, c_in, c_out, k=3, stride=1, padding=None, bias=True, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        super().__init__(c_in, c_out, k, stride, padding, bias, rng, dtype)
        self.sn = SpectralNorm(self.weight, rng=rng)

    def named_parameters(self, prefix=""):
        # the wrapped weight is owned by this layer, not re-listed under .sn
        yield f"{prefix}weight", self.weight
        if self.bias is not None:
            yield f"{prefix}bias", self.bias

    def forward(self, x: Node) -> Node:
        return ag.conv2d(x, self.sn.forward(), self.bias, self.stride, self.padding)


class Linear(Module):
    """y = x @ W + b with W stored [in, out]."""

    def __init__(self, n_in, n_out, bias=True, rng=None, dtype=np.float32, std=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        std = np.sqrt(2.0 / n_in) if std is None else std
        self.weight = Parameter((rng.standard_normal((n_in, n_out)) * std).astype(dtype))
        self.bias = Parameter(np.zeros(n_out, dtype)) if bias else None

    def forward(self, x: Node) -> Node:
        y = ag.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


# -- projection discriminator head -------------------------------------------

def projection_head(features: Node, embed: Node, linear: Node, labels) -> Node:
    """score[n] = linear . f[n] + embed[s_n] . f[n]."""
    labels = _labels(labels, features.shape[0])
    n_cond = embed.shape[0]
    if labels.min() < 0 or labels.max() >= n_cond:
        raise IndexError(f"condition out of range [0, {n_cond})")
    uncond = ag.sum_axes(ag.mul(features, ag.reshape(linear, (1, -1))), (1,))
    proj = ag.sum_axes(ag.mul(features, ag.take(embed, labels)), (1,))
    return uncond + proj


class ProjectionHead(Module):
    def __init__(self, n_features, n_cond, rng=None, dtype=np.float32, spectral=True):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.linear = Parameter((rng.standard_normal(n_features) * 0.02).astype(dtype))
        self.embed = Parameter((rng.standard_normal((n_cond, n_features)) * 0.02).astype(dtype))
        self.spectral = spectral
        if spectral:
            self.sn_linear = _SNVector(self.linear, rng=rng)
            self.sn_embed = _SNVector(self.embed, rng=rng)

    def named_parameters(self, prefix=""):
        yield f"{prefix}linear", self.linear
        yield f"{prefix}embed", self.embed

    def forward(self, features: Node, labels) -> Node:
        if self.spectral:
            return projection_head(features, self.sn_embed.forward(), self.sn_linear.forward(), labels)
        return projection_head(features, self.embed, self.linear, labels)


class _SNVector(SpectralNorm):
    def _matrix(self):
        w = self.weight.value.astype(np.float64)
        return w.reshape(1, -1) if w.ndim == 1 else w.reshape(w.shape[0], -1)

    def forward(self) -> Node:
        if self.training:
            self.power_iteration()
        w = self.weight
        if w.value.ndim == 1:
            return ag.reshape(ag.spectral_normalize(ag.reshape(w, (1, -1)), self.u, self.v), (-1,))
        return ag.spectral_normalize(w, self.u, self.v)


# -- residual blocks ---------------------------------------------------------

MODES = ("generator-upsample", "discriminator-downsample", "plain")
CONDITIONINGS = ("cconv", "cbn", "none")


@dataclass(frozen=True)
class ResBlockSpec:
    in_ch: int
    out_ch: int
    mode: str = "plain"
    conditioning: str = "none"
    first: bool = False  # discriminator input block: no leading activation, pool-then-conv shortcut

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.conditioning not in CONDITIONINGS:
            raise ValueError(f"conditioning must be one of {CONDITIONINGS}, got {self.conditioning!r}")
        if self.mode == "discriminator-downsample" and self.conditioning != "none":
            raise ValueError("discriminator blocks are unconditioned; conditioning enters via the projection head")


class ResBlock(Module):
    """Residual block; generator side is BN-ReLU-(up)-conv-BN-ReLU-conv, discriminator side is
    ReLU-conv-ReLU-conv-pool with spectral norm everywhere and no BN."""

    def __init__(self, spec: ResBlockSpec, n_cond: int = 1, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.spec = spec
        ci, co = spec.in_ch, spec.out_ch
        if spec.mode == "discriminator-downsample":
            self.conv1 = SNConv2d(ci, co, 3, rng=rng, dtype=dtype)
            self.conv2 = SNConv2d(co, co, 3, rng=rng, dtype=dtype)
            self.shortcut = SNConv2d(ci, co, 1, rng=rng, dtype=dtype)
            return
        cond = spec.conditioning
        if cond == "cbn":
            self.bn1 = CondBatchNorm2d(ci, n_cond, dtype=dtype)
            self.bn2 = CondBatchNorm2d(co, n_cond, dtype=dtype)
        else:
            self.bn1 = BatchNorm2d(ci, dtype=dtype)
            self.bn2 = BatchNorm2d(co, dtype=dtype)
        if cond == "cconv":
            self.conv1 = CConv2d(ci, co, n_cond, 3, rng=rng, dtype=dtype)
            self.conv2 = CConv2d(co, co, n_cond, 3, rng=rng, dtype=dtype)
        else:
            self.conv1 = Conv2d(ci, co, 3, rng=rng, dtype=dtype)
            self.conv2 = Conv2d(co, co, 3, rng=rng, dtype=dtype)
        self.shortcut = Conv2d(ci, co, 1, rng=rng, dtype=dtype) if (ci != co or spec.mode != "plain") else None

    def _conv(self, layer, h, labels):
        return layer.forward(h, labels) if isinstance(layer, CConv2d) else layer.forward(h)

    def forward(self, x: Node, labels=None) -> Node:
        spec = self.spec
        if x.shape[1] != spec.in_ch:
            raise T.ShapeError(f"block expects {spec.in_ch} input channels, got {x.shape}")
        if spec.conditioning == "none" and labels is not None:
            raise ValueError("condition given to a block built without conditioning")
        if spec.conditioning != "none" and labels is None:
            raise ValueError(f"{spec.conditioning} block needs a condition")
        if spec.mode == "discriminator-downsample":
            h = x if spec.first else ag.relu(x)
            h = self.conv1.forward(h)
            h = self.conv2.forward(ag.relu(h))
            h = ag.avg_pool2(h)
            if spec.first:
                skip = self.shortcut.forward(ag.avg_pool2(x))
            else:
                skip = ag.avg_pool2(self.shortcut.forward(x))
            return h + skip
        up = spec.mode == "generator-upsample"
        h = ag.relu(self.bn1.forward(x, labels))
        if up:
            h = ag.upsample2(h)
        h = self._conv(self.conv1, h, labels)
        h = ag.relu(self.bn2.forward(h, labels))
        h = self._conv(self.conv2, h, labels)
        skip = ag.upsample2(x) if up else x
        if self.shortcut is not None:
            skip = self.shortcut.forward(skip)
        return h + skip


def resblock_forward(block: ResBlock, x: np.ndarray, s=None) -> np.ndarray:
    labels = None if s is None else np.full(x.shape[0], s)
    return block.forward(Node(x), labels).value


# -- parameter accounting ----------------------------------------------------

def count_conditioning_params(model: Module) -> dict:
    """Exact conditioning-parameter counts, with a per-layer breakdown.

    ``dense_alternative`` is what per-filter-per-channel scale+shift would cost
    for the same cConv layers.
    """
    counts = {"cconv_params": 0, "cbn_params": 0, "dense_alternative": 0, "layers": []}
    for path, m in model._named_modules():
        if isinstance(m, CConv2d):
            n, ci, co = m.n_cond, m.c_in, m.c_out
            cc, dense = n * (ci + co), 2 * n * ci * co
            assert m.table.n_params == cc
            counts["cconv_params"] += cc
            counts["dense_alternative"] += dense
            counts["layers"].append({"path": path.rstrip("."), "kind": "cconv", "n_cond": n,
                                     "c_in": ci, "c_out": co, "params": cc, "dense_alternative": dense})
        elif isinstance(m, CondBatchNorm2d):
            n, c = m.theta.value.shape
            counts["cbn_params"] += 2 * n * c
            counts["layers"].append({"path": path.rstrip("."), "kind": "cbn", "n_cond": n,
                                     "c": c, "params": 2 * n * c})
    return counts
