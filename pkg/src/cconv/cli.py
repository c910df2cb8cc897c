"""Command-line entry point: train, sample, morph, eval, gradcheck, bench.

Exit codes: 0 success, 1 bad input (config, flags, checkpoint), 2 training diverged.
"""
from __future__ import annotations

import argparse
import configparser
import contextlib
import json
import os
import re
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_BAD_INPUT, EXIT_DIVERGED = 0, 1, 2


class UsageError(Exception):
    """Reported on stderr and mapped to exit code 1."""


# -- config ------------------------------------------------------------------

def _key_lines(text: str) -> dict[str, int]:
    """1-based line number of each key's (last) definition."""
    out = {}
    for i, line in enumerate(text.splitlines(), 1):
        m = re.match(r"\s*([A-Za-z_][\w.-]*)\s*[=:]", line)
        if m and not line.lstrip().startswith(("#", ";", "[")):
            out[m.group(1).lower()] = i
    return out


def load_config(path, overrides: dict | None = None):
    """Parse a sectioned ``key = value`` file into (TrainConfig, output dir or None).

    Keys may sit in any section; ``out_dir`` is the only key that is not a
    TrainConfig field. Raises UsageError with ``file:line: field: problem``.
    """
    from .engine import TrainConfig

    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"{path}: cannot read config: {exc.strerror}") from exc
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    try:
        parser.read_string(text, source=str(path))
    except configparser.MissingSectionHeaderError as exc:
        raise UsageError(f"{path}:{exc.lineno}: expected a [section] header before {exc.line.strip()!r}") from exc
    except configparser.ParsingError as exc:
        lineno, line = exc.errors[0]
        raise UsageError(f"{path}:{lineno}: cannot parse {line.strip()!r} (want key = value)") from exc
    except configparser.DuplicateOptionError as exc:
        raise UsageError(f"{path}:{exc.lineno}: field {exc.option!r} given twice") from exc
    except configparser.Error as exc:
        raise UsageError(f"{path}: {exc.message}") from exc
    lines = _key_lines(text)
    types = {f.name: f.type for f in fields(TrainConfig)}
    kw, out_dir, seen = {}, None, {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            where = f"{path}:{lines.get(key, '?')}"
            if key in seen:
                raise UsageError(f"{where}: field {key!r} already set in [{seen[key]}]")
            seen[key] = section
            if key == "out_dir":
                out_dir = raw
                continue
            if key not in types:
                raise UsageError(f"{where}: unknown field {key!r}; known fields: {', '.join(sorted(types))}, out_dir")
            kind = types[key]
            try:
                kw[key] = int(raw) if kind == "int" else float(raw) if kind == "float" else raw
            except ValueError:
                raise UsageError(f"{where}: field {key!r}: expected {kind}, got {raw!r}") from None
    kw.update(overrides or {})
    try:
        cfg = TrainConfig(**kw)
    except ValueError as exc:
        msg = str(exc)
        bad = next((k for k in sorted(kw, key=len, reverse=True) if msg.startswith(k)), None)
        bad = bad or next((k for k in kw if k in msg), None)
        where = f"{path}:{lines.get(bad, '?')}: field {bad!r}" if bad else str(path)
        raise UsageError(f"{where}: {msg}") from None
    return cfg, out_dir


# -- helpers -----------------------------------------------------------------

def _thread_limit():
    """Cap BLAS threads when CCONV_NUM_THREADS is set."""
    raw = os.environ.get("CCONV_NUM_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"CCONV_NUM_THREADS must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _load_generator(ckpt):
    from .engine import load_generator
    try:
        return load_generator(ckpt)
    except FileNotFoundError:
        raise UsageError(f"{ckpt}: no such checkpoint") from None
    except (ValueError, KeyError) as exc:
        raise UsageError(f"{ckpt}: unreadable checkpoint ({exc})") from None


def _noise(seed, n, z_dim, dtype):
    return np.random.default_rng(seed).standard_normal((n, z_dim)).astype(dtype)


def _write(path, img):
    from .images import write_image
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    written = write_image(path, img, png=path.suffix.lower() == ".png")
    print(f"wrote {written}" + (f" and {path}" if path.suffix.lower() == ".png" and path.exists() else ""))


# -- commands ----------------------------------------------------------------

def cmd_train(args) -> int:
    from .data import SynthSpec, generate_dataset
    from .engine import TrainingDiverged, build_models, train
    from .layers import count_conditioning_params

    overrides = {}
    if args.mode is not None:
        overrides["mode"] = args.mode
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg, cfg_out = load_config(args.config, overrides)
    out = Path(args.out or cfg_out or f"runs/{cfg.mode}-seed{cfg.seed}")
    data = generate_dataset(SynthSpec(cfg.dataset, cfg.n_classes, cfg.image_size, cfg.samples_per_class,
                                      cfg.data_seed))
    g, _ = build_models(cfg)
    counts = count_conditioning_params(g)
    print(f"mode={cfg.mode} seed={cfg.seed} g_iters={cfg.total_g_iters} out={out}")
    print(f"conditioning params: cconv={counts['cconv_params']} cbn={counts['cbn_params']} "
          f"dense_alternative={counts['dense_alternative']}")
    t0 = time.perf_counter()

    def on_log(rec):
        print(f"iter={rec['iter']} d_loss={rec['d_loss']:.6f} g_loss={rec['g_loss']:.6f}", flush=True)

    try:
        result = train(cfg, data, out, on_log=on_log)
    except TrainingDiverged as exc:
        print(f"error: {exc}; last good state in {exc.checkpoint}", file=sys.stderr)
        return EXIT_DIVERGED
    manifest = {"mode": cfg.mode, "seed": cfg.seed, "config": {f.name: getattr(cfg, f.name) for f in fields(cfg)},
                "checkpoint": result.checkpoint.name, "crc32": f"{result.crc:08x}",
                "d_steps": result.d_steps, "g_steps": result.g_steps,
                "seconds": round(time.perf_counter() - t0, 3), "conditioning_params": counts}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    print(f"checkpoint {result.checkpoint} crc32={result.crc:08x}")
    return EXIT_OK


def _parse_grid(text):
    m = re.fullmatch(r"(\d+)[xX](\d+)", text)
    if not m or int(m.group(1)) < 1 or int(m.group(2)) < 1:
        raise UsageError(f"--grid wants RxC with positive integers, got {text!r}")
    return int(m.group(1)), int(m.group(2))


def cmd_sample(args) -> int:
    from .engine import sample_grid, tile_grid

    rows, cols = _parse_grid(args.grid)
    g, _, _ = _load_generator(args.ckpt)
    z = _noise(args.seed, cols, g.z_dim, g.fc.weight.dtype)
    _write(args.out, tile_grid(sample_grid(g, rows, z), cols))
    return EXIT_OK


def cmd_morph(args) -> int:
    from .engine import morph_strip, tile_grid

    g, _, _ = _load_generator(args.ckpt)
    if g.mode != "cconv":
        raise UsageError(f"morph interpolates cConv condition parameters; {args.ckpt} was trained in "
                         f"{g.mode!r} mode, which has none. Use a checkpoint trained with --mode cconv.")
    for flag, s in (("--from", args.src), ("--to", args.dst)):
        if not 0 <= s < g.n_classes:
            raise UsageError(f"{flag} {s} is outside the model's conditions 0..{g.n_classes - 1}")
    if args.steps < 2:
        raise UsageError("--steps must be at least 2")
    z = _noise(args.seed, 1, g.z_dim, g.fc.weight.dtype)
    strip = morph_strip(g, args.src, args.dst, args.steps, z)
    _write(args.out, tile_grid(strip, args.steps))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import evaluate_checkpoint

    if args.n < 2:
        raise UsageError("--n must be at least 2")
    _load_generator(args.ckpt)  # validates before the slower setup
    ckpt = Path(args.ckpt)
    res = evaluate_checkpoint(ckpt, args.n, args.seed, args.cache_dir, ckpt.parent / "train.log")
    print(f"is={res['is']:.6f} fid={res['fid']:.6f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import gradsuite

    rows = gradsuite.run(args.seed)
    print(gradsuite.format_report(rows))
    return EXIT_OK if all(r.ok for r in rows) else EXIT_BAD_INPUT


def _time(fn, repeats):
    fn()  # warm-up
    best = float("inf")
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best * 1000.0


def bench_rows(ch=16, n_classes=3, image_size=16, batch=16, repeats=3, seed=0) -> list[dict]:
    """Per-layer timings and conditioning-parameter counts for each way of conditioning a generator conv."""
    from . import autograd as ag
    from .autograd import Node, Tape
    from .layers import CConv2d, CondBatchNorm2d, Conv2d

    rng = np.random.default_rng(seed)
    rows = []
    res = 8
    while res <= image_size:
        x = Node(rng.standard_normal((batch, ch, res, res)).astype(np.float32))
        labels = np.arange(batch) % n_classes
        layers = {
            "cconv": (CConv2d(ch, ch, n_classes, rng=rng), lambda m, x: m.forward(x, labels),
                      n_classes * (ch + ch)),
            "cbn": ((Conv2d(ch, ch, rng=rng), CondBatchNorm2d(ch, n_classes)),
                    lambda m, x: m[1].forward(m[0].forward(x), labels), 2 * n_classes * ch),
            "plain": (Conv2d(ch, ch, rng=rng), lambda m, x: m.forward(x), 0),
        }
        for kind, (mod, fwd, params) in layers.items():
            def forward():
                return fwd(mod, x)

            def backward():
                with Tape() as tape:
                    loss = ag.sum_all(fwd(mod, x))
                tape.backward(loss)

            rows.append({"layer": f"{res}x{res}", "kind": kind, "c_in": ch, "c_out": ch,
                         "cond_params": params, "dense_alternative": 2 * n_classes * ch * ch,
                         "fwd_ms": _time(forward, repeats), "fwd_bwd_ms": _time(backward, repeats)})
        res *= 2
    return rows


def cmd_bench(args) -> int:
    from .engine import Generator
    from .layers import count_conditioning_params

    print(f"{'layer':<24}{'kind':<8}{'c_in':>6}{'c_out':>6}{'cond_params':>13}{'dense_alt':>11}"
          f"{'fwd_ms':>10}{'fwd+bwd_ms':>12}")
    for r in bench_rows(args.ch, args.n_classes, args.image_size, args.batch, args.repeats):
        print(f"{r['layer']:<24}{r['kind']:<8}{r['c_in']:>6}{r['c_out']:>6}{r['cond_params']:>13}"
              f"{r['dense_alternative']:>11}{r['fwd_ms']:>10.3f}{r['fwd_bwd_ms']:>12.3f}")
    print()
    print("generator totals (conditioning parameters only):")
    for mode in ("cconv", "cbn", "concat"):
        g = Generator(args.n_classes, ch=args.ch, image_size=args.image_size, mode=mode)
        c = count_conditioning_params(g)
        print(f"  {mode:<7} cconv={c['cconv_params']} cbn={c['cbn_params']} "
              f"dense_alternative={c['dense_alternative']}")
        for layer in c["layers"]:
            if layer["kind"] == "cconv":
                print(f"    {layer['path']:<22} N(C_in+C_out)={layer['n_cond']}*({layer['c_in']}+{layer['c_out']})"
                      f"={layer['params']}  2*N*C_in*C_out={layer['dense_alternative']}")
    return EXIT_OK


# -- entry -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    from .engine import MODES

    class _ModeAction(argparse.Action):
        def __call__(self, parser, ns, value, option_string=None):
            if value not in MODES:
                raise UsageError(f"unknown mode {value!r}; valid modes: {', '.join(MODES)}")
            setattr(ns, self.dest, value)

    p = argparse.ArgumentParser(prog="cconv", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a conditional GAN from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--mode", action=_ModeAction, help=f"one of {', '.join(MODES)}")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="output directory (overrides out_dir in the config)")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="write a class-by-noise sample grid")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--grid", required=True, help="RxC; row r uses condition r mod n_classes")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_sample)

    m = sub.add_parser("morph", help="interpolate cConv condition parameters between two classes")
    m.add_argument("--ckpt", required=True)
    m.add_argument("--from", dest="src", type=int, required=True)
    m.add_argument("--to", dest="dst", type=int, required=True)
    m.add_argument("--steps", type=int, required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=cmd_morph)

    e = sub.add_parser("eval", help="toy IS / FID of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--n", type=int, default=5000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--cache-dir", help="feature-net and real-stats cache (default: <ckpt dir>/metrics_cache)")
    e.set_defaults(func=cmd_eval)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every op and layer")
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="per-layer timings and parameter counts")
    b.add_argument("--ch", type=int, default=16)
    b.add_argument("--n-classes", type=int, default=3)
    b.add_argument("--image-size", type=int, default=16)
    b.add_argument("--batch", type=int, default=16)
    b.add_argument("--repeats", type=int, default=3)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except SystemExit as exc:  # argparse usage errors exit 2; remap so 2 only means divergence
        code = exc.code if isinstance(exc.code, int) else EXIT_BAD_INPUT
        return EXIT_BAD_INPUT if code == 2 else code


if __name__ == "__main__":
    sys.exit(main())
