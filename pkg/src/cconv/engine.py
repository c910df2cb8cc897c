"""Hinge-loss conditional GAN: models, losses, Adam, the alternating schedule,
checkpoints, sampling and category morphing."""
from __future__ import annotations

import copy
import io
import logging
import struct
import zlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import tensor as T
from .autograd import Node, Parameter, Tape
from .data import KINDS
from .layers import (CConv2d, Conv2d, BatchNorm2d, Linear, Module, ProjectionHead, ResBlock,
                     ResBlockSpec)

log = logging.getLogger(__name__)

MODES = ("cconv", "cbn", "concat")
CKPT_MAGIC = b"CCKP"
CKPT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, checkpoint=None):
        super().__init__(msg)
        self.checkpoint = checkpoint


# -- losses ------------------------------------------------------------------

def d_loss(d_real: Node, d_fake: Node) -> Node:
    """mean(max(0, 1 - D(real))) + mean(max(0, 1 + D(fake)))."""
    if d_real.value.size == 0 or d_fake.value.size == 0:
        raise ValueError("empty batch")
    if d_real.shape != d_fake.shape:
        raise T.ShapeError(f"d_real {d_real.shape} vs d_fake {d_fake.shape}")
    return ag.mean(ag.relu(ag.add_scalar(-d_real, 1.0))) + ag.mean(ag.relu(ag.add_scalar(d_fake, 1.0)))


def g_loss(d_fake: Node) -> Node:
    if d_fake.value.size == 0:
        raise ValueError("empty batch")
    return -ag.mean(d_fake)


# -- optimizer ---------------------------------------------------------------

class AdamState:
    def __init__(self, params, lr=0.0002, beta1=0.0, beta2=0.9, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def adam_step(state: AdamState, params=None, grads=None) -> None:
    """One bias-corrected Adam update in place; grads default to each parameter's ``.grad``."""
    params = state.params if params is None else list(params)
    grads = [p.grad for p in params] if grads is None else list(grads)
    for p, g in zip(params, grads):
        if g.shape != p.value.shape:
            raise T.ShapeError(f"grad {g.shape} vs parameter {p.value.shape}")
        if not np.isfinite(g).all():
            raise T.NonFiniteError(f"adam_step: non-finite gradient for parameter of shape {p.value.shape}")
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    index = {id(p): i for i, p in enumerate(state.params)}
    for p, g in zip(params, grads):
        i = index[id(p)]
        m = b1 * state.m[i] + (1.0 - b1) * g
        v = b2 * state.v[i] + (1.0 - b2) * g * g
        state.m[i], state.v[i] = m.astype(p.value.dtype), v.astype(p.value.dtype)
        upd = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.value = (p.value - upd).astype(p.value.dtype)


# -- models ------------------------------------------------------------------

@dataclass
class TrainConfig:
    mode: str = "cconv"
    n_classes: int = 3
    dataset: str = "colored-shapes"
    image_size: int = 16
    samples_per_class: int = 1000
    data_seed: int = 0
    batch_size: int = 16
    total_g_iters: int = 5000
    d_steps_per_g: int = 5
    seed: int = 1
    z_dim: int = 32
    g_ch: int = 16
    d_ch: int = 16
    lr: float = 0.0002
    beta1: float = 0.0
    beta2: float = 0.9
    log_every: int = 100
    ckpt_every: int = 1000
    sample_every: int = 500

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {', '.join(MODES)}; got {self.mode!r}")
        if self.dataset not in KINDS:
            raise ValueError(f"dataset must be one of {', '.join(KINDS)}; got {self.dataset!r}")
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type == "int" and f.name != "total_g_iters" and not (isinstance(v, int) and v > 0) \
                    and f.name not in ("seed", "data_seed"):
                raise ValueError(f"{f.name} must be a positive integer, got {v!r}")
        if self.total_g_iters < 0:
            raise ValueError("total_g_iters must be >= 0")
        if self.image_size % 4 or self.image_size < 8:
            raise ValueError("image_size must be a multiple of 4 and >= 8")


def _n_resample(image_size: int) -> int:
    return int(np.log2(image_size // 4))


class Generator(Module):
    """z -> linear -> 4x4 -> upsampling ResBlocks -> BN-ReLU-conv-tanh.

    ``mode`` picks where the condition enters: cConv layers inside the blocks,
    cBN inside the blocks, or a one-hot appended to z.
    """

    def __init__(self, n_classes=3, z_dim=32, ch=32, image_size=16, mode="cconv", seed=0, dtype=np.float32):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {', '.join(MODES)}; got {mode!r}")
        rng = np.random.default_rng(seed)
        self.n_classes, self.z_dim, self.ch, self.mode = n_classes, z_dim, ch, mode
        z_in = z_dim + (n_classes if mode == "concat" else 0)
        self.fc = Linear(z_in, ch * 16, rng=rng, dtype=dtype, std=np.sqrt(1.0 / z_in))
        cond = {"cconv": "cconv", "cbn": "cbn", "concat": "none"}[mode]
        self.blocks = [ResBlock(ResBlockSpec(ch, ch, "generator-upsample", cond), n_classes, rng, dtype)
                       for _ in range(_n_resample(image_size))]
        self.bn_out = BatchNorm2d(ch, dtype=dtype)
        self.conv_out = Conv2d(ch, 3, 3, rng=rng, dtype=dtype)

    def forward(self, z: Node, labels) -> Node:
        labels = np.asarray(labels, dtype=np.intp)
        if labels.min() < 0 or labels.max() >= self.n_classes:
            raise IndexError(f"condition out of range [0, {self.n_classes})")
        if z.shape[1] != self.z_dim:
            raise T.ShapeError(f"noise has {z.shape[1]} dims, generator expects {self.z_dim}")
        if self.mode == "concat":
            onehot = np.eye(self.n_classes, dtype=z.dtype)[labels]
            z = ag.concat([z, Node(onehot)], axis=1)
        h = ag.reshape(self.fc.forward(z), (z.shape[0], self.ch, 4, 4))
        block_labels = None if self.mode == "concat" else labels
        for b in self.blocks:
            h = b.forward(h, block_labels)
        h = ag.relu(self.bn_out.forward(h))
        return ag.tanh(self.conv_out.forward(h))

    def generate(self, z: np.ndarray, labels) -> np.ndarray:
        """Eval-mode images for noise ``z`` [N, z_dim] and per-row (or scalar) labels."""
        z = np.asarray(z, dtype=self.fc.weight.dtype)
        labels = np.broadcast_to(np.asarray(labels, dtype=np.intp), (z.shape[0],))
        was = self.training
        self.eval()
        try:
            return self.forward(Node(z), labels).value
        finally:
            self.train(was)

    def cconv_layers(self) -> list[CConv2d]:
        return [m for m in self.modules() if isinstance(m, CConv2d)]


class Discriminator(Module):
    """Spectrally normalized downsampling ResBlocks, ReLU, spatial sum, projection head."""

    def __init__(self, n_classes=3, ch=32, image_size=16, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        n = _n_resample(image_size)
        self.blocks = [ResBlock(ResBlockSpec(3 if i == 0 else ch, ch, "discriminator-downsample", first=(i == 0)),
                                rng=rng, dtype=dtype) for i in range(n)]
        self.head = ProjectionHead(ch, n_classes, rng=rng, dtype=dtype)

    def features(self, x: Node) -> Node:
        h = x
        for b in self.blocks:
            h = b.forward(h)
        return ag.sum_axes(ag.relu(h), (2, 3))

    def forward(self, x: Node, labels) -> Node:
        return self.head.forward(self.features(x), labels)


def build_models(cfg: TrainConfig, dtype=np.float32) -> tuple[Generator, Discriminator]:
    g = Generator(cfg.n_classes, cfg.z_dim, cfg.g_ch, cfg.image_size, cfg.mode, seed=cfg.seed * 2 + 1, dtype=dtype)
    d = Discriminator(cfg.n_classes, cfg.d_ch, cfg.image_size, seed=cfg.seed * 2 + 2, dtype=dtype)
    return g, d


# -- checkpoints -------------------------------------------------------------

def write_checkpoint(path, entries: dict[str, np.ndarray]) -> int:
    """Write path-keyed tensors; returns the trailing CRC32."""
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(entries)))
    for key in sorted(entries):
        raw = key.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        T.write_tensor(buf, np.atleast_1d(entries[key]))
    body = buf.getvalue()
    crc = zlib.crc32(body) & 0xFFFFFFFF
    Path(path).write_bytes(body + struct.pack("<I", crc))
    return crc


def read_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ValueError(f"{path}: CRC mismatch")
    fh = io.BytesIO(body)
    fh.read(4)
    version, count = struct.unpack("<II", fh.read(8))
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", fh.read(4))
        key = fh.read(n).decode("utf-8")
        out[key] = T.read_tensor(fh)
    return out


def checkpoint_crc(path) -> int:
    return struct.unpack("<I", Path(path).read_bytes()[-4:])[0]


_META_INT = ("n_classes", "image_size", "z_dim", "g_ch", "d_ch", "seed", "batch_size", "d_steps_per_g",
             "samples_per_class", "data_seed")


def training_state(cfg: TrainConfig, g: Generator, d: Discriminator, opt_g: AdamState, opt_d: AdamState,
                   g_iter: int, losses=(np.nan, np.nan)) -> dict[str, np.ndarray]:
    st = {f"g.{k}": v for k, v in g.state().items()}
    st.update({f"d.{k}": v for k, v in d.state().items()})
    for name, opt, model in (("opt_g", opt_g, g), ("opt_d", opt_d, d)):
        names = [k for k, _ in model.named_parameters()]
        for k, m, v in zip(names, opt.m, opt.v):
            st[f"{name}.m.{k}"] = m
            st[f"{name}.v.{k}"] = v
        st[f"{name}.t"] = np.array([opt.t], np.float64)
    st["meta.mode"] = np.array([MODES.index(cfg.mode)], np.float64)
    st["meta.g_iter"] = np.array([g_iter], np.float64)
    st["meta.losses"] = np.array(losses, np.float64)
    st["meta.dataset"] = np.array([KINDS.index(cfg.dataset)], np.float64)
    for k in _META_INT:
        st[f"meta.{k}"] = np.array([getattr(cfg, k)], np.float64)
    return {k: np.array(v, copy=True) for k, v in st.items()}


def config_from_checkpoint(state: dict) -> TrainConfig:
    kw = {k: int(state[f"meta.{k}"][0]) for k in _META_INT}
    return TrainConfig(mode=MODES[int(state["meta.mode"][0])], dataset=KINDS[int(state["meta.dataset"][0])], **kw)


def load_generator(path) -> tuple[Generator, TrainConfig, dict]:
    state = read_checkpoint(path)
    cfg = config_from_checkpoint(state)
    g, _ = build_models(cfg)
    g.load_state(state, prefix="g.")
    return g, cfg, state


def load_models(path):
    state = read_checkpoint(path)
    cfg = config_from_checkpoint(state)
    g, d = build_models(cfg)
    g.load_state(state, prefix="g.")
    d.load_state(state, prefix="d.")
    return g, d, cfg, state


# -- training ----------------------------------------------------------------

class ClassSampler:
    """Uniform class labels paired with real images of the same class."""

    def __init__(self, images, labels, n_classes, rng):
        labels = np.asarray(labels)
        if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
            raise ValueError(f"dataset labels exceed the configured {n_classes} conditions")
        self.pools = [np.flatnonzero(labels == c) for c in range(n_classes)]
        if any(len(p) == 0 for p in self.pools):
            raise ValueError(f"dataset is missing examples for some of the {n_classes} conditions")
        self.images, self.n_classes, self.rng = images, n_classes, rng

    def labels(self, n):
        return self.rng.integers(0, self.n_classes, size=n)

    def real(self, labels):
        idx = np.array([p[self.rng.integers(len(p))] for p in (self.pools[c] for c in labels)])
        return self.images[idx]


@dataclass
class TrainResult:
    checkpoint: Path
    crc: int
    d_steps: int
    g_steps: int
    history: list


def _check_finite_loss(x: Node, what: str):
    if not np.isfinite(x.value).all():
        raise T.NonFiniteError(f"{what} is not finite")


def train(cfg: TrainConfig, dataset, out_dir, on_log=None) -> TrainResult:
    """Alternating hinge-loss training: ``d_steps_per_g`` D updates per G update.

    Writes ``ckpt.bin`` (final), periodic ``ckpt_<iter>.bin``, ``samples_<iter>.ppm``
    grids, and ``train.log``. On a non-finite loss or gradient the last good
    state is written to ``ckpt_last_good.bin`` and :class:`TrainingDiverged` raised.
    """
    from .images import write_image  # local: image IO is only needed when training writes grids

    images, labels = dataset
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    sampler = ClassSampler(images, labels, cfg.n_classes, rng)
    g, d = build_models(cfg)
    opt_g = AdamState(g.parameters(), cfg.lr, cfg.beta1, cfg.beta2)
    opt_d = AdamState(d.parameters(), cfg.lr, cfg.beta1, cfg.beta2)
    logf = open(out / "train.log", "a", encoding="utf-8")
    history = []
    bs = cfg.batch_size
    dtype = g.fc.weight.dtype
    grid_z = np.random.default_rng(cfg.seed + 10_000).standard_normal((8, cfg.z_dim)).astype(dtype)
    last_good = training_state(cfg, g, d, opt_g, opt_d, 0)
    try:
        for it in range(1, cfg.total_g_iters + 1):
            for _ in range(cfg.d_steps_per_g):
                y = sampler.labels(bs)
                real = sampler.real(y)
                z = rng.standard_normal((bs, cfg.z_dim)).astype(dtype)
                fake = g.forward(Node(z), y).value
                opt_d.zero_grad()
                with Tape() as tape:
                    out_d = d.forward(Node(np.concatenate([real, fake])), np.concatenate([y, y]))
                    ld = d_loss(ag.take(out_d, np.arange(bs)), ag.take(out_d, np.arange(bs, 2 * bs)))
                _check_finite_loss(ld, "d_loss")
                tape.backward(ld)
                adam_step(opt_d)
            y = sampler.labels(bs)
            z = rng.standard_normal((bs, cfg.z_dim)).astype(dtype)
            opt_g.zero_grad()
            with Tape() as tape, ag.frozen(d.parameters()):
                lg = g_loss(d.forward(g.forward(Node(z), y), y))
            _check_finite_loss(lg, "g_loss")
            tape.backward(lg)
            adam_step(opt_g)
            losses = (float(ld.value[0]), float(lg.value[0]))
            if it % cfg.log_every == 0 or it == cfg.total_g_iters:
                rec = {"iter": it, "d_loss": losses[0], "g_loss": losses[1]}
                history.append(rec)
                logf.write(f"iter={it} d_loss={rec['d_loss']:.6f} g_loss={rec['g_loss']:.6f}\n")
                logf.flush()
                if on_log:
                    on_log(rec)
            if it % cfg.sample_every == 0:
                write_image(out / f"samples_{it}.ppm", tile_grid(sample_grid(g, cfg.n_classes, grid_z), len(grid_z)))
            if it % cfg.ckpt_every == 0:
                write_checkpoint(out / f"ckpt_{it}.bin", training_state(cfg, g, d, opt_g, opt_d, it, losses))
            last_good = training_state(cfg, g, d, opt_g, opt_d, it, losses)
    except (T.NonFiniteError, FloatingPointError) as exc:
        path = out / "ckpt_last_good.bin"
        write_checkpoint(path, last_good)
        logf.close()
        raise TrainingDiverged(f"training diverged: {exc}", path) from exc
    logf.close()
    path = out / "ckpt.bin"
    crc = write_checkpoint(path, last_good)
    return TrainResult(path, crc, opt_d.t, opt_g.t, history)


# -- sampling and morphing ---------------------------------------------------

def generate(generator: Generator, z: np.ndarray, s) -> np.ndarray:
    return generator.generate(z, s)


def sample_grid(generator: Generator, rows: int, z: np.ndarray) -> np.ndarray:
    """Tiles [rows*cols, 3, H, W], row-major: tile (r, c) is condition r mod n_classes with noise z[c]."""
    cols = z.shape[0]
    labels = np.repeat(np.arange(rows) % generator.n_classes, cols)
    return generator.generate(np.tile(z, (rows, 1)), labels)


def tile_grid(tiles: np.ndarray, cols: int | None = None) -> np.ndarray:
    """Assemble tiles [K, 3, H, W] into one [3, rows*H, cols*W] image."""
    k, c, h, w = tiles.shape
    cols = cols or k
    if k % cols:
        raise ValueError(f"{k} tiles do not fill rows of {cols}")
    rows = k // cols
    return tiles.reshape(rows, cols, c, h, w).transpose(2, 0, 3, 1, 4).reshape(c, rows * h, cols * w)


def morph(generator: Generator, s1: int, s2: int, t: float, z: np.ndarray) -> np.ndarray:
    """Generate with every cConv layer's gamma/beta linearly interpolated between two conditions."""
    if generator.mode != "cconv":
        raise ValueError(f"morphing interpolates cConv parameters; this generator uses {generator.mode!r}")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    layers = generator.cconv_layers()
    for layer in layers:
        layer.morph = (int(s1), int(s2), float(t))
    try:
        return generator.generate(z, np.full(z.shape[0], s1))
    finally:
        for layer in layers:
            layer.morph = None


def morph_strip(generator: Generator, s1: int, s2: int, steps: int, z: np.ndarray) -> np.ndarray:
    """Tiles for t = k/(steps-1), k = 0..steps-1 (one noise vector)."""
    if steps < 2:
        raise ValueError("need at least 2 steps")
    return np.concatenate([morph(generator, s1, s2, k / (steps - 1), z[:1]) for k in range(steps)])


def snapshot(model: Module) -> Module:
    """Frozen deep copy for concurrent evaluation."""
    return copy.deepcopy(model).eval()
