"""Finite-difference gradient report over every registered op and every trainable layer.

Everything runs in float64. Layers containing spectral norm are checked in eval
mode so the power-iteration vectors stay fixed between perturbed evaluations;
batch-norm layers are checked in training mode (batch statistics are part of
the graph).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Node
from .engine import Discriminator, Generator
from .layers import (CConv2d, CondBatchNorm2d, Conv2d, BatchNorm2d, Linear, ProjectionHead, ResBlock,
                     ResBlockSpec, SNConv2d)

TOL = 1e-6

_U = np.array([0.6, 0.0, 0.8])
_V = np.linspace(-1, 1, 18) / np.linalg.norm(np.linspace(-1, 1, 18))
_LAB = np.array([0, 2, 1, 2])


def _t(x):
    return ag.sum_all(ag.tanh(x))


OP_CASES = {
    "add": (lambda a, b: _t(a + b), [(3, 4), (1, 4)]),
    "neg": (lambda a: _t(-a), [(5,)]),
    "mul": (lambda a, b: ag.sum_all(a * b), [(2, 3), (2, 3)]),
    "scale": (lambda a: _t(ag.scale(a, -0.7)), [(4,)]),
    "add_scalar": (lambda a: _t(ag.add_scalar(a, 0.3)), [(4,)]),
    "relu": (lambda a: ag.sum_all(ag.relu(a) * ag.relu(a)), [(3, 5)]),
    "tanh": (lambda a: _t(a), [(6,)]),
    "sum": (lambda a: ag.sum_all(a * a), [(2, 2, 2)]),
    "mean": (lambda a: ag.mean(ag.tanh(a)), [(3, 3)]),
    "sum_axes": (lambda a: _t(ag.sum_axes(a, (1, 3))), [(2, 3, 2, 2)]),
    "reshape": (lambda a, b: ag.sum_all(ag.reshape(a, (3, 2)) * b), [(2, 3), (3, 2)]),
    "concat": (lambda a, b: _t(ag.concat([a, b], axis=1)), [(2, 3), (2, 2)]),
    "take": (lambda a: _t(ag.take(a, _LAB)), [(3, 4)]),
    "scatter_rows": (lambda a, b: _t(ag.scatter_rows([a, b], [[0, 3], [2, 1]], 4)), [(2, 3), (2, 3)]),
    "matmul": (lambda a, b: _t(ag.matmul(a, b)), [(3, 4), (4, 2)]),
    "conv2d": (lambda x, w, b: _t(ag.conv2d(x, w, b, padding=1)), [(2, 3, 5, 5), (4, 3, 3, 3), (4,)]),
    "avg_pool2": (lambda x: _t(ag.avg_pool2(x)), [(2, 2, 4, 4)]),
    "upsample2": (lambda x: _t(ag.upsample2(x)), [(2, 2, 2, 3)]),
    "batch_normalize": (lambda x, t: ag.sum_all(ag.tanh(ag.batch_normalize(x, 1e-5)) * t),
                        [(3, 2, 3, 3), (3, 2, 3, 3)]),
    "channel_affine": (lambda x, s, b: _t(ag.channel_affine(x, s, b)), [(2, 3, 2, 2), (2, 3), (3,)]),
    "condition_weights": (lambda w, g, b, x: _t(ag.conv2d(x, ag.condition_weights(w, g, b, 1), padding=1)),
                          [(4, 3, 3, 3), (2, 4), (2, 3), (2, 3, 4, 4)]),
    "multiplicative_weights": (lambda w, g, b: _t(ag.multiplicative_weights(w, g, b, 0)),
                               [(4, 3, 3, 3), (2, 4), (2, 3)]),
    "spectral_normalize": (lambda w: _t(ag.spectral_normalize(w, _U, _V)), [(3, 2, 3, 3)]),
    "softmax_xent": (lambda z: ag.softmax_xent(z, [0, 2, 1]), [(3, 4)]),
}


@dataclass
class Row:
    case: str
    param: str
    error: float

    @property
    def ok(self) -> bool:
        return self.error <= TOL


def _randomize(module, rng, scale=0.5):
    """Move every parameter off its structured init (ones/zeros) so all paths carry gradient."""
    for p in module.parameters():
        p.assign(p.value + scale * rng.standard_normal(p.value.shape))


def _check_module(name, module, loss_fn, rng, randomize=True):
    module.to(np.float64)
    if randomize:
        _randomize(module, rng)
    params = dict(module.named_parameters())
    return [Row(name, k, e) for k, e in ag.check_params(loss_fn, params).items()]


def _weighted(out: Node, rng) -> Node:
    # random projection of the output so every element contributes a distinct weight
    return ag.sum_all(out * Node(rng.standard_normal(out.shape)))


def layer_rows(seed: int = 0) -> list[Row]:
    rng = np.random.default_rng(seed)
    rows = []
    x = rng.standard_normal((4, 3, 6, 6))
    lab = np.array([0, 1, 2, 1])

    conv = Conv2d(3, 4, 3, rng=rng)

    def conv_loss():
        return _weighted(conv.forward(Node(x)), np.random.default_rng(1))
    rows += _check_module("conv2d layer", conv, conv_loss, rng)

    cc = CConv2d(3, 4, 3, 3, rng=rng)

    def cc_loss():
        return _weighted(cc.forward(Node(x), lab), np.random.default_rng(2))
    rows += _check_module("cconv (gamma, beta, W)", cc, cc_loss, rng)

    bn = BatchNorm2d(3)

    def bn_loss():
        return _weighted(bn.forward(Node(x)), np.random.default_rng(3))
    rows += _check_module("batch norm", bn, bn_loss, rng)

    cbn = CondBatchNorm2d(3, 3)

    def cbn_loss():
        return _weighted(cbn.forward(Node(x), lab), np.random.default_rng(4))
    rows += _check_module("cbn (theta, delta)", cbn, cbn_loss, rng)

    sn = SNConv2d(3, 4, 3, rng=rng)
    sn.to(np.float64)
    _randomize(sn, rng)
    sn.sn.power_iteration(5)
    sn.eval()

    def sn_loss():
        return _weighted(sn.forward(Node(x)), np.random.default_rng(5))
    rows += _check_module("spectral-normed conv", sn, sn_loss, rng, randomize=False)

    lin = Linear(5, 3, rng=rng)
    xf = rng.standard_normal((4, 5))

    def lin_loss():
        return _weighted(lin.forward(Node(xf)), np.random.default_rng(6))
    rows += _check_module("linear", lin, lin_loss, rng)

    head = ProjectionHead(5, 3, rng=rng)
    head.to(np.float64)
    _randomize(head, rng)
    head.eval()

    def head_loss():
        return _weighted(head.forward(Node(xf), np.array([0, 2, 1, 0])), np.random.default_rng(7))
    rows += _check_module("projection head", head, head_loss, rng, randomize=False)

    for cond in ("cconv", "cbn", "none"):
        blk = ResBlock(ResBlockSpec(3, 2, "generator-upsample", cond), 3, rng=rng)
        blk_lab = None if cond == "none" else lab

        def blk_loss(blk=blk, blk_lab=blk_lab):
            return _weighted(blk.forward(Node(x[:, :, :3, :3]), blk_lab), np.random.default_rng(8))
        rows += _check_module(f"generator resblock ({cond})", blk, blk_loss, rng)

    for first in (True, False):
        dblk = ResBlock(ResBlockSpec(3, 2, "discriminator-downsample", first=first), rng=rng)
        dblk.to(np.float64)
        _randomize(dblk, rng)
        for m in dblk.modules():
            if hasattr(m, "power_iteration"):
                m.power_iteration(5)
        dblk.eval()

        def dblk_loss(dblk=dblk):
            return _weighted(dblk.forward(Node(x)), np.random.default_rng(9))
        rows += _check_module(f"discriminator resblock (first={first})", dblk, dblk_loss, rng, randomize=False)
    return rows


def model_rows(seed: int = 0) -> list[Row]:
    """Whole small generators (each conditioning mode) and a discriminator."""
    rng = np.random.default_rng(seed)
    rows = []
    z = rng.standard_normal((4, 3))
    lab = np.array([0, 1, 2, 0])
    for mode in ("cconv", "cbn", "concat"):
        g = Generator(3, z_dim=3, ch=2, image_size=8, mode=mode, seed=seed)

        def g_loss(g=g):
            return _weighted(g.forward(Node(z), lab), np.random.default_rng(10))
        rows += _check_module(f"generator ({mode})", g, g_loss, rng, randomize=True)
    d = Discriminator(3, ch=2, image_size=8, seed=seed)
    d.to(np.float64)
    _randomize(d, rng)
    for m in d.modules():
        if hasattr(m, "power_iteration"):
            m.power_iteration(5)
    d.eval()
    img = rng.standard_normal((4, 3, 8, 8))

    def d_loss():
        return ag.sum_all(d.forward(Node(img), lab))
    rows += _check_module("discriminator", d, d_loss, rng, randomize=False)
    return rows


def op_rows(seed: int = 7) -> list[Row]:
    rows = []
    for name in sorted(OP_CASES):
        build, shapes = OP_CASES[name]
        rows += [Row(f"op {name}", k, e) for k, e in ag.gradcheck(build, shapes, seed=seed).items()]
    missing = set(ag.registered_ops()) - set(OP_CASES)
    if missing:
        raise RuntimeError(f"no gradient case for ops: {sorted(missing)}")
    return rows


def run(seed: int = 0) -> list[Row]:
    return op_rows() + layer_rows(seed) + model_rows(seed)


def format_report(rows: list[Row]) -> str:
    width = max(len(f"{r.case} / {r.param}") for r in rows)
    lines = [f"{(r.case + ' / ' + r.param):<{width}}  {r.error:.3e}  {'ok' if r.ok else 'FAIL'}" for r in rows]
    bad = sum(not r.ok for r in rows)
    lines.append(f"{len(rows)} gradients checked, {bad} above {TOL:g}")
    return "\n".join(lines)
