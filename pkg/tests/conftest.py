import numpy as np
import pytest


def naive_conv2d(x, w, bias=None, stride=1, padding=0):
    """Six nested loops over (n, o, y, x, c, ky/kx) in float64."""
    n, c, h, wd = x.shape
    co, ci, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for b in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ch in range(ci):
                        for ky in range(k):
                            for kx in range(k):
                                acc += float(xp[b, ch, i * stride + ky, j * stride + kx]) * float(w[o, ch, ky, kx])
                    out[b, o, i, j] = acc + (0.0 if bias is None else float(bias[o]))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
