import os
import subprocess
import sys

import numpy as np
import pytest

from tracenet import _kernels
from tracenet.embed import build_huffman


def _problem(seed, n=12, dim=6, pairs=300):
    rng = np.random.default_rng(seed)
    counts = sorted(rng.integers(1, 40, size=n).tolist(), reverse=True)
    pts, sgn, lens = build_huffman(counts).arrays()
    syn0 = (rng.random((n, dim)) - 0.5) / dim
    syn1 = rng.normal(size=(n - 1, dim)) * 0.1
    centers = rng.integers(0, n, size=pairs).astype(np.int32)
    targets = rng.integers(0, n, size=pairs).astype(np.int32)
    return syn0, syn1, centers, targets, pts, sgn, lens


def test_fallback_always_available():
    assert "python" in _kernels.available_backends()
    assert _kernels.BACKEND in _kernels.available_backends()


@pytest.mark.skipif("cython" not in _kernels.available_backends(), reason="extension not built")
@pytest.mark.parametrize("seed", range(3))
def test_backends_agree(seed):
    results = {}
    for name in ("cython", "python"):
        mod = _kernels.load_backend(name)
        syn0, syn1, centers, targets, pts, sgn, lens = _problem(seed)
        loss = mod.train_pairs(syn0, syn1, centers, targets, pts, sgn, lens, 0.025, 0.0025, 0, 600,
                               np.zeros(syn0.shape[1]))
        after = mod.pairs_loss(syn0, syn1, centers, targets, pts, sgn, lens)
        results[name] = (loss, after, syn0, syn1)
    c, p = results["cython"], results["python"]
    assert c[0] == pytest.approx(p[0], rel=1e-10)
    assert c[1] == pytest.approx(p[1], rel=1e-10)
    np.testing.assert_allclose(c[2], p[2], rtol=1e-10, atol=1e-13)
    np.testing.assert_allclose(c[3], p[3], rtol=1e-10, atol=1e-13)


def test_environment_forces_fallback():
    env = dict(os.environ, TRACENET_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from tracenet import _kernels; print(_kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
