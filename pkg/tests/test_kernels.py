import os
import subprocess
import sys

import numpy as np
import pytest

from amtml import _kernels_py as py
from amtml import kernels

cy = pytest.importorskip("amtml._ext")


def test_backend_reported():
    assert kernels.BACKEND in ("cython", "python")


def test_env_var_forces_numpy_fallback():
    env = dict(os.environ, AMTML_KERNELS="python")
    out = subprocess.run([sys.executable, "-c", "import amtml; print(amtml.BACKEND)"],
                         capture_output=True, text=True, env=env, check=True)
    assert out.stdout.strip() == "python"


@pytest.mark.parametrize("seed", range(5))
def test_conv_backends_agree(seed):
    rng = np.random.default_rng(seed)
    n, c, o, h, w = rng.integers(1, 5, 5)
    x = rng.normal(size=(n, c, h, w))
    wt = rng.normal(size=(o, c, 3, 3))
    b = rng.normal(size=o)
    g = rng.normal(size=(n, o, h, w))
    assert np.allclose(cy.conv2d_forward(x, wt, b), py.conv2d_forward(x, wt, b), rtol=0, atol=1e-12)
    for a, r in zip(cy.conv2d_backward(x, wt, g), py.conv2d_backward(x, wt, g)):
        assert np.allclose(a, r, rtol=0, atol=1e-12)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(9)
    x, w, b = rng.normal(size=(1, 2, 3, 4)), rng.normal(size=(2, 2, 3, 3)), rng.normal(size=2)
    ref = np.zeros((1, 2, 3, 4))
    for o in range(2):
        for y in range(3):
            for z in range(4):
                acc = b[o]
                for ci in range(2):
                    for i in range(3):
                        for j in range(3):
                            yy, zz = y + i - 1, z + j - 1
                            if 0 <= yy < 3 and 0 <= zz < 4:
                                acc += x[0, ci, yy, zz] * w[o, ci, i, j]
                ref[0, o, y, z] = acc
    for impl in (cy, py):
        assert np.allclose(impl.conv2d_forward(x, w, b), ref, rtol=0, atol=1e-12)


def test_max_pool_backends_agree_including_ties():
    rng = np.random.default_rng(1)
    x = rng.integers(0, 3, size=(4, 3, 3, 3)).astype(float)
    v1, i1 = cy.max_pool_argmax(x)
    v2, i2 = py.max_pool_argmax(x)
    assert np.array_equal(v1, v2) and np.array_equal(i1, i2)
    g = rng.normal(size=(4, 3))
    assert np.array_equal(cy.max_pool_backward(g, i1, 3, 3), py.max_pool_backward(g, i2, 3, 3))


def test_angle_backends_agree():
    rng = np.random.default_rng(2)
    t = rng.dirichlet(np.ones(5), 9)
    s = rng.dirichlet(np.ones(5), 9)
    s[3] = s[4]  # a degenerate pair to exercise skipping
    trip = np.array([rng.choice(9, 3, replace=False) for _ in range(60)], dtype=np.int64)
    a, b = cy.angle_huber(t, s, trip, 1e-8), py.angle_huber(t, s, trip, 1e-8)
    assert a[1] == b[1] and abs(a[0] - b[0]) < 1e-12
    assert np.allclose(a[2], b[2], atol=1e-12) and np.allclose(a[3], b[3], atol=1e-12)
