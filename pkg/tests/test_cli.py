import json
import re

import numpy as np
import pytest

from cconv.autograd import Node
from cconv.cli import main
from cconv.images import decode_ppm

TINY = """\
[model]
image_size = 8
g_ch = 4
d_ch = 4
z_dim = 4

[data]
samples_per_class = 8

[train]
batch_size = 4
total_g_iters = {iters}
log_every = 1
ckpt_every = 100
sample_every = 100
"""


def write_cfg(tmp_path, iters=1, extra=""):
    p = tmp_path / "run.ini"
    p.write_text(TINY.format(iters=iters) + extra)
    return p


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    p = base / "run.ini"
    p.write_text(TINY.format(iters=2))
    ckpts = {}
    for mode in ("cconv", "cbn"):
        assert main(["train", "--config", str(p), "--mode", mode, "--seed", "3", "--out", str(base / mode)]) == 0
        ckpts[mode] = base / mode / "ckpt.bin"
    return ckpts


# -- train -------------------------------------------------------------------

def test_zero_iteration_train_writes_checkpoint(tmp_path, capsys):
    code, out, _ = run(capsys, "train", "--config", write_cfg(tmp_path, 0), "--out", tmp_path / "o")
    assert code == 0
    assert (tmp_path / "o" / "ckpt.bin").exists()
    assert json.loads((tmp_path / "o" / "manifest.json").read_text())["g_steps"] == 0


def test_modes_report_different_parameter_counts(trained):
    m = {k: json.loads((v.parent / "manifest.json").read_text()) for k, v in trained.items()}
    cc, cb = m["cconv"]["conditioning_params"], m["cbn"]["conditioning_params"]
    assert cc != cb
    assert cc["cconv_params"] == sum(3 * (layer["c_in"] + layer["c_out"]) for layer in cc["layers"]) > 0
    assert cb["cconv_params"] == 0 and cb["cbn_params"] > 0


def test_unknown_mode_lists_valid_modes(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--config", write_cfg(tmp_path), "--mode", "film")
    assert code == 1
    assert "cconv" in err and "cbn" in err and "concat" in err


def test_unknown_field_reports_line(tmp_path, capsys):
    cfg = write_cfg(tmp_path, extra="learning_rat = 0.1\n")
    code, _, err = run(capsys, "train", "--config", cfg)
    n_lines = len(cfg.read_text().splitlines())
    assert code == 1
    assert f"run.ini:{n_lines}:" in err and "learning_rat" in err


def test_bad_value_reports_line_and_field(tmp_path, capsys):
    p = tmp_path / "bad.ini"
    p.write_text("[train]\nbatch_size = many\n")
    code, _, err = run(capsys, "train", "--config", p)
    assert code == 1 and "bad.ini:2:" in err and "batch_size" in err


def test_invalid_value_reports_line_and_field(tmp_path, capsys):
    p = tmp_path / "bad.ini"
    p.write_text("[train]\nseed = 1\nd_steps_per_g = 0\n")
    code, _, err = run(capsys, "train", "--config", p)
    assert code == 1 and "bad.ini:3:" in err and "d_steps_per_g" in err


@pytest.mark.parametrize("text", ["batch_size = 4\n", "[train]\nthis line has no equals\n"])
def test_malformed_config(tmp_path, capsys, text):
    p = tmp_path / "bad.ini"
    p.write_text(text)
    code, _, err = run(capsys, "train", "--config", p)
    assert code == 1 and re.search(r"bad\.ini:\d+:", err)


def test_missing_config_file(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--config", tmp_path / "nope.ini")
    assert code == 1 and "nope.ini" in err


def test_divergence_exits_two(tmp_path, capsys, monkeypatch):
    import cconv.engine as engine
    real = engine.g_loss
    monkeypatch.setattr(engine, "g_loss", lambda d: real(d) * Node(np.array([np.nan], np.float32)))
    code, _, err = run(capsys, "train", "--config", write_cfg(tmp_path, 2), "--out", tmp_path / "o")
    assert code == 2
    assert "diverged" in err and (tmp_path / "o" / "ckpt_last_good.bin").exists()


def test_cli_train_is_deterministic(tmp_path, capsys):
    cfg = write_cfg(tmp_path, 1)
    for name in ("a", "b"):
        assert run(capsys, "train", "--config", cfg, "--seed", "9", "--out", tmp_path / name)[0] == 0
    assert (tmp_path / "a" / "ckpt.bin").read_bytes() == (tmp_path / "b" / "ckpt.bin").read_bytes()


# -- sample / morph ----------------------------------------------------------

def test_sample_grid_layout_and_determinism(trained, tmp_path, capsys):
    a, b = tmp_path / "a.ppm", tmp_path / "b.ppm"
    assert run(capsys, "sample", "--ckpt", trained["cconv"], "--grid", "3x4", "--out", a)[0] == 0
    assert run(capsys, "sample", "--ckpt", trained["cconv"], "--grid", "3x4", "--out", b)[0] == 0
    assert a.read_bytes() == b.read_bytes()
    px = decode_ppm(a.read_bytes())
    assert px.shape == (3 * 8, 4 * 8, 3)


def test_sample_png_alongside_ppm(trained, tmp_path, capsys):
    pytest.importorskip("PIL")
    out = tmp_path / "g.png"
    assert run(capsys, "sample", "--ckpt", trained["cbn"], "--grid", "2x2", "--out", out)[0] == 0
    assert out.exists() and out.with_suffix(".ppm").exists()


@pytest.mark.parametrize("grid", ["3", "0x2", "axb"])
def test_bad_grid(trained, tmp_path, capsys, grid):
    assert run(capsys, "sample", "--ckpt", trained["cconv"], "--grid", grid, "--out", tmp_path / "x.ppm")[0] == 1


def test_morph_two_steps_equal_sample_endpoints(trained, tmp_path, capsys):
    from cconv.engine import generate, load_generator
    from cconv.images import encode_ppm
    strip = tmp_path / "m.ppm"
    assert run(capsys, "morph", "--ckpt", trained["cconv"], "--from", 0, "--to", 2, "--steps", 2,
               "--out", strip)[0] == 0
    g, _, _ = load_generator(trained["cconv"])
    z = np.random.default_rng(0).standard_normal((1, g.z_dim)).astype(np.float32)
    px = decode_ppm(strip.read_bytes())
    for k, s in enumerate((0, 2)):
        tile = decode_ppm(encode_ppm(generate(g, z, s)[0]))
        np.testing.assert_array_equal(px[:, 8 * k:8 * (k + 1)], tile)


def test_morph_on_cbn_checkpoint_explains(trained, tmp_path, capsys):
    code, _, err = run(capsys, "morph", "--ckpt", trained["cbn"], "--from", 0, "--to", 1, "--steps", 3,
                       "--out", tmp_path / "m.ppm")
    assert code == 1 and "cbn" in err and "cconv" in err


def test_morph_rejects_bad_condition(trained, tmp_path, capsys):
    code, _, err = run(capsys, "morph", "--ckpt", trained["cconv"], "--from", 0, "--to", 5, "--steps", 3,
                       "--out", tmp_path / "m.ppm")
    assert code == 1 and "--to" in err


def test_missing_checkpoint(tmp_path, capsys):
    code, _, err = run(capsys, "sample", "--ckpt", tmp_path / "none.bin", "--grid", "1x1", "--out", tmp_path / "x")
    assert code == 1 and "none.bin" in err


# -- eval / gradcheck / bench ------------------------------------------------

def test_eval_is_deterministic(trained, tmp_path, capsys):
    args = ("eval", "--ckpt", trained["cconv"], "--n", 60, "--cache-dir", tmp_path)
    c1, o1, _ = run(capsys, *args)
    c2, o2, _ = run(capsys, *args)
    assert c1 == c2 == 0
    assert o1 == o2
    assert re.fullmatch(r"is=\d+\.\d+ fid=\d+\.\d+\n", o1)
    log = (trained["cconv"].parent / "train.log").read_text()
    assert re.search(r"iter=2 d_loss=\S+ g_loss=\S+ is=\S+ fid=\S+ net=[0-9a-f]{16}", log)


def test_gradcheck_passes(capsys):
    code, out, _ = run(capsys, "gradcheck")
    assert code == 0
    assert out.strip().endswith("0 above 1e-06")


def test_bench_reports_formula_counts(capsys):
    code, out, _ = run(capsys, "bench", "--ch", 4, "--batch", 2, "--image-size", 8, "--repeats", 1)
    assert code == 0
    rows = [line.split() for line in out.splitlines() if line.startswith("8x8")]
    kinds = {r[1]: r for r in rows}
    assert int(kinds["cconv"][4]) == 3 * (4 + 4)
    assert int(kinds["cconv"][5]) == 2 * 3 * 4 * 4
    assert "N(C_in+C_out)=3*(4+4)=24" in out


def test_thread_env(monkeypatch, capsys):
    monkeypatch.setenv("CCONV_NUM_THREADS", "zero")
    assert run(capsys, "bench", "--ch", 2, "--batch", 1, "--image-size", 8, "--repeats", 1)[0] == 1
    monkeypatch.setenv("CCONV_NUM_THREADS", "1")
    assert run(capsys, "bench", "--ch", 2, "--batch", 1, "--image-size", 8, "--repeats", 1)[0] == 0


def test_argparse_errors_are_exit_one(capsys):
    assert run(capsys, "sample")[0] == 1
    assert run(capsys, "frobnicate")[0] == 1
