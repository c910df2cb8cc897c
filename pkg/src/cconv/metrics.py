"""Inception-score and Frechet-distance analogs computed with a small in-repo classifier.

Absolute values are only comparable between runs that share the same
``ToyFeatureNet`` hash.
"""
from __future__ import annotations

import hashlib
import io
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import tensor as T
from .autograd import Node, Tape
from .layers import Conv2d, Linear, Module

log = logging.getLogger(__name__)

SYM_TOL = 1e-8
STATS_MAGIC = b"CCRS"


# -- feature network ---------------------------------------------------------

class ToyFeatureNet(Module):
    """Three conv-ReLU blocks (pooling after the first two), global average, linear head."""

    def __init__(self, n_classes=3, widths=(16, 32, 64), seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        c1, c2, c3 = widths
        self.n_classes = n_classes
        self.convs = [Conv2d(3, c1, rng=rng, dtype=dtype), Conv2d(c1, c2, rng=rng, dtype=dtype),
                      Conv2d(c2, c3, rng=rng, dtype=dtype)]
        self.head = Linear(c3, n_classes, rng=rng, dtype=dtype)

    @property
    def n_features(self) -> int:
        return self.head.weight.shape[0]

    def _features(self, x: Node) -> Node:
        h = x
        for i, conv in enumerate(self.convs):
            h = ag.relu(conv.forward(h))
            if i < len(self.convs) - 1:
                h = ag.avg_pool2(h)
        return ag.scale(ag.sum_axes(h, (2, 3)), 1.0 / (h.shape[2] * h.shape[3]))

    def _logits(self, x: Node) -> Node:
        return self.head.forward(self._features(x))

    def _batched(self, images, fn, batch=500):
        dtype = self.head.weight.dtype
        images = np.asarray(images)
        out = [fn(Node(images[i:i + batch].astype(dtype, copy=False))).value for i in range(0, len(images), batch)]
        return np.concatenate(out).astype(np.float64)

    def features(self, images) -> np.ndarray:
        """Penultimate activations [N, F] as float64."""
        return self._batched(images, self._features)

    def logits(self, images) -> np.ndarray:
        return self._batched(images, self._logits)

    def predict(self, images) -> np.ndarray:
        return self.logits(images).argmax(axis=1)

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, v in sorted(self.state().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()[:16]


def train_feature_net(images, labels, n_classes, epochs=4, batch_size=64, lr=1e-3, seed=0) -> ToyFeatureNet:
    """Fit the classifier with Adam (beta1 0.9, beta2 0.999) on softmax cross-entropy."""
    from .engine import AdamState, adam_step  # engine imports nothing from here; keeps module load order flat

    net = ToyFeatureNet(n_classes, seed=seed)
    opt = AdamState(net.parameters(), lr, 0.9, 0.999)
    rng = np.random.default_rng(seed)
    images = np.asarray(images, np.float32)
    labels = np.asarray(labels, np.intp)
    for _ in range(epochs):
        order = rng.permutation(len(images))
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            opt.zero_grad()
            with Tape() as tape:
                loss = ag.softmax_xent(net._logits(Node(images[idx])), labels[idx])
            tape.backward(loss)
            adam_step(opt)
    return net


def save_feature_net(path, net: ToyFeatureNet) -> None:
    from .engine import write_checkpoint

    st = {f"net.{k}": v for k, v in net.state().items()}
    st["meta.n_classes"] = np.array([net.n_classes], np.float64)
    write_checkpoint(path, st)


def load_feature_net(path) -> ToyFeatureNet:
    from .engine import read_checkpoint

    st = read_checkpoint(path)
    net = ToyFeatureNet(int(st["meta.n_classes"][0]))
    net.load_state(st, prefix="net.")
    return net


# -- inception score ---------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def score_from_probs(probs: np.ndarray, splits: int = 1) -> tuple[float, float]:
    """exp(mean_i KL(p(n|x_i) || p(n))) per split; returns (mean, std) over splits."""
    probs = np.asarray(probs, np.float64)
    if len(probs) < 2:
        raise ValueError("inception score needs at least 2 images")
    if splits < 1 or len(probs) < splits:
        raise ValueError(f"{len(probs)} images cannot fill {splits} splits")
    scores = []
    for part in np.array_split(probs, splits):
        marginal = part.mean(axis=0, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(part > 0, part * (np.log(part) - np.log(marginal)), 0.0)
        scores.append(np.exp(terms.sum(axis=1).mean()))
    return float(np.mean(scores)), float(np.std(scores))


def inception_score(images, net: ToyFeatureNet, splits: int = 1) -> tuple[float, float]:
    if len(images) < 2:
        raise ValueError("inception score needs at least 2 images")
    if len(images) < splits:
        raise ValueError(f"{len(images)} images cannot fill {splits} splits")
    return score_from_probs(softmax(net.logits(images)), splits)


# -- Frechet distance --------------------------------------------------------

@dataclass(frozen=True)
class GaussianStats:
    mu: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mu, cov = np.asarray(self.mu, np.float64), np.asarray(self.cov, np.float64)
        if cov.shape != (mu.size, mu.size):
            raise T.ShapeError(f"cov {cov.shape} does not match mean of size {mu.size}")
        object.__setattr__(self, "mu", mu.reshape(-1))
        object.__setattr__(self, "cov", cov)


def gaussian_stats(features) -> GaussianStats:
    x = np.asarray(features, np.float64)
    if x.ndim != 2:
        raise T.ShapeError(f"features must be [M, F], got {x.shape}")
    if x.shape[0] < 2:
        raise ValueError(f"need at least 2 samples for a covariance, got {x.shape[0]}")
    mu = x.mean(axis=0)
    d = x - mu
    cov = d.T @ d / (x.shape[0] - 1)
    return GaussianStats(mu, (cov + cov.T) / 2)


def _check_symmetric(c: np.ndarray, name: str):
    scale = max(1.0, float(np.abs(c).max(initial=0.0)))
    if np.abs(c - c.T).max(initial=0.0) > SYM_TOL * scale:
        raise ValueError(f"{name} covariance is not symmetric")


def sqrt_psd(a: np.ndarray) -> np.ndarray:
    """Symmetric square root of a PSD matrix; negative eigenvalues are clamped to 0."""
    a = np.asarray(a, np.float64)
    vals, vecs = np.linalg.eigh((a + a.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def fid(p: GaussianStats, q: GaussianStats) -> float:
    """||mu_p - mu_q||^2 + tr(C_p + C_q - 2 (C_p^1/2 C_q C_p^1/2)^1/2), floored at 0."""
    if p.mu.shape != q.mu.shape:
        raise T.ShapeError(f"feature sizes differ: {p.mu.size} vs {q.mu.size}")
    _check_symmetric(p.cov, "first")
    _check_symmetric(q.cov, "second")
    root_p = sqrt_psd(p.cov)
    inner = root_p @ q.cov @ root_p
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_cross = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = p.mu - q.mu
    value = diff @ diff + np.trace(p.cov) + np.trace(q.cov) - 2.0 * tr_cross
    return float(max(0.0, value))


# -- real-data stats cache ---------------------------------------------------

def save_stats(path, stats: GaussianStats, net_hash: str) -> None:
    buf = io.BytesIO()
    raw = net_hash.encode("utf-8")
    buf.write(STATS_MAGIC + struct.pack("<I", len(raw)) + raw)
    T.write_tensor(buf, stats.mu)
    T.write_tensor(buf, stats.cov)
    Path(path).write_bytes(buf.getvalue())


def load_stats(path) -> tuple[GaussianStats, str]:
    fh = io.BytesIO(Path(path).read_bytes())
    if fh.read(4) != STATS_MAGIC:
        raise ValueError(f"{path}: not a stats file")
    (n,) = struct.unpack("<I", fh.read(4))
    net_hash = fh.read(n).decode("utf-8")
    return GaussianStats(T.read_tensor(fh), T.read_tensor(fh)), net_hash


def real_stats(net: ToyFeatureNet, real_images=None, cache=None, log_path=None) -> GaussianStats:
    """Real-data feature stats, read from ``cache`` when it matches the net hash, else recomputed.

    ``real_images`` may be an array or a zero-argument callable producing one, so
    callers with a valid cache never build the real set.
    """
    h = net.digest()
    if cache is not None and Path(cache).exists():
        stats, cached_hash = load_stats(cache)
        if cached_hash == h:
            return stats
        reason = f"real-stats cache {cache} was built with feature net {cached_hash}, current is {h}"
    else:
        reason = f"real-stats cache {cache} missing"
    if real_images is None:
        raise FileNotFoundError(reason + " and no real images were given to rebuild it")
    _warn(f"{reason}; recomputing", log_path)
    if callable(real_images):
        real_images = real_images()
    stats = gaussian_stats(net.features(real_images))
    if cache is not None:
        save_stats(cache, stats, h)
    return stats


def _warn(msg, log_path):
    log.warning(msg)
    if log_path is not None:
        with open(log_path, "a", encoding="utf-8") as fh:
            fh.write(f"warning: {msg}\n")


# -- evaluation --------------------------------------------------------------

def generate_eval_set(generator, n_samples: int, seed: int = 0, batch: int = 500) -> tuple[np.ndarray, np.ndarray]:
    """``n_samples`` images with labels cycling through the classes and noise from ``seed``."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n_samples, generator.z_dim))
    labels = np.arange(n_samples) % generator.n_classes
    imgs = [generator.generate(z[i:i + batch], labels[i:i + batch]) for i in range(0, n_samples, batch)]
    return np.concatenate(imgs), labels


def evaluate(generator, net: ToyFeatureNet, n_samples: int = 5000, real_images=None, cache=None,
             seed: int = 0, log_path=None, iteration=None, losses=None) -> dict:
    """IS and FID of ``n_samples`` generated images.

    With ``log_path`` a line ``iter=<n> d_loss=<f> g_loss=<f> is=<f> fid=<f> net=<hash>`` is appended
    (loss and iteration fields only when known).
    """
    ref = real_stats(net, real_images, cache, log_path)
    fake, _ = generate_eval_set(generator, n_samples, seed)
    is_mean, _ = inception_score(fake, net)
    value = fid(gaussian_stats(net.features(fake)), ref)
    out = {"is": is_mean, "fid": value, "net_hash": net.digest()}
    if log_path is not None:
        head = "" if iteration is None else f"iter={iteration} "
        if losses is not None and np.all(np.isfinite(losses)):
            head += f"d_loss={losses[0]:.6f} g_loss={losses[1]:.6f} "
        with open(log_path, "a", encoding="utf-8") as fh:
            fh.write(f"{head}is={is_mean:.6f} fid={value:.6f} net={out['net_hash']}\n")
    return out


FEATURE_NET_SAMPLES = 300
REAL_SEED_OFFSET = 7919
NET_SEED_OFFSET = 104729


def feature_net_for(cfg, cache_dir=None) -> ToyFeatureNet:
    """The classifier for a training config's dataset, trained once and cached as a checkpoint file."""
    from .data import SynthSpec, generate_dataset

    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"featnet_{cfg.dataset}_{cfg.n_classes}c_{cfg.image_size}px_{cfg.data_seed}.bin"
        if path.exists():
            return load_feature_net(path)
    spec = SynthSpec(cfg.dataset, cfg.n_classes, cfg.image_size, FEATURE_NET_SAMPLES,
                     seed=cfg.data_seed + NET_SEED_OFFSET)
    net = train_feature_net(*generate_dataset(spec), cfg.n_classes)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_feature_net(path, net)
    return net


def real_images_for(cfg, n: int) -> np.ndarray:
    """``n`` held-out real images (fresh seed, balanced classes) for the reference statistics."""
    from .data import SynthSpec, generate_dataset

    per_class = -(-n // cfg.n_classes)
    spec = SynthSpec(cfg.dataset, cfg.n_classes, cfg.image_size, per_class, seed=cfg.data_seed + REAL_SEED_OFFSET)
    return generate_dataset(spec)[0][:n]


def evaluate_checkpoint(ckpt, n_samples: int = 5000, seed: int = 0, cache_dir=None, log_path=None) -> dict:
    from .engine import load_generator

    ckpt = Path(ckpt)
    generator, cfg, state = load_generator(ckpt)
    cache_dir = Path(cache_dir) if cache_dir is not None else ckpt.parent / "metrics_cache"
    cache_dir.mkdir(parents=True, exist_ok=True)
    net = feature_net_for(cfg, cache_dir)
    cache = cache_dir / f"real_stats_{cfg.dataset}_{cfg.n_classes}c_{cfg.image_size}px_{n_samples}.bin"
    return evaluate(generator, net, n_samples, lambda: real_images_for(cfg, n_samples), cache, seed, log_path,
                    int(state["meta.g_iter"][0]), state.get("meta.losses"))


def class_color_errors(generator, images, labels, n_per_class: int = 300, seed: int = 0) -> list[dict]:
    """Per class: distance between mean generated color and mean data color, next to the data's
    intra-class color spread (RMS distance of per-image mean colors to their class mean)."""
    from .data import class_statistics

    data_rows = {r["label"]: r for r in class_statistics(images, labels)}
    fake, fake_labels = generate_eval_set(generator, n_per_class * generator.n_classes, seed)
    out = []
    for r in class_statistics(fake, fake_labels):
        ref = data_rows[r["label"]]
        out.append({"label": r["label"], "error": float(np.linalg.norm(r["mean_color"] - ref["mean_color"])),
                    "intra_class_std": ref["color_std"], "generated": r["mean_color"],
                    "data": ref["mean_color"]})
    return out
