import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coordfit._kernels import _pykernels, cubic_weights

ck = pytest.importorskip("coordfit._kernels._ckernels",
                         reason="compiled kernels not built")


def test_cubic_weights_partition_of_unity():
    t = np.linspace(0, 1, 1001)
    w, dw = cubic_weights(t)
    assert np.max(np.abs(w.sum(-1) - 1.0)) < 1e-12
    assert np.max(np.abs(dw.sum(-1))) < 1e-12


def test_cubic_weights_derivative_matches_difference():
    t = np.linspace(0.05, 0.95, 19)
    h = 1e-6
    w_hi, _ = cubic_weights(t + h)
    w_lo, _ = cubic_weights(t - h)
    _, dw = cubic_weights(t)
    assert np.allclose((w_hi - w_lo) / (2 * h), dw, atol=1e-8)


def test_trilinear_backends_agree(rng):
    field = rng.normal(size=(7, 6, 5, 3))
    q = rng.uniform(-1.5, 7.5, size=(500, 3))
    for clamp in (False, True):
        a = ck.trilinear(field, q, clamp, -3.0)
        b = _pykernels.trilinear(field, q, clamp, -3.0)
        assert np.max(np.abs(a - b)) < 1e-13


def test_trilinear_single_voxel_axis(rng):
    field = rng.normal(size=(4, 1, 3, 1))
    q = np.column_stack([rng.uniform(0, 3, 20), np.zeros(20), rng.uniform(0, 2, 20)])
    assert np.allclose(ck.trilinear(field, q), _pykernels.trilinear(field, q), atol=1e-13)


def test_bspline_backends_agree(rng):
    coeffs = rng.normal(size=(7, 8, 6, 3))
    u = rng.uniform(1.0, 3.999, size=(400, 3))
    va, ga = ck.bspline_eval(coeffs, u, True)
    vb, gb = _pykernels.bspline_eval(coeffs, u, True)
    assert np.max(np.abs(va - vb)) < 1e-12
    assert np.max(np.abs(ga - gb)) < 1e-12
    v_only, g_none = ck.bspline_eval(coeffs, u, False)
    assert g_none is None and np.array_equal(v_only, va)


def test_bspline_matches_naive_64_term_sum(rng):
    coeffs = rng.normal(size=(6, 6, 6, 3))
    u = rng.uniform(1.0, 2.999, size=(20, 3))

    def b3(t):
        t = abs(t)
        if t < 1:
            return (4 - 6 * t * t + 3 * t ** 3) / 6
        if t < 2:
            return (2 - t) ** 3 / 6
        return 0.0

    want = np.zeros((20, 3))
    for n, p in enumerate(u):
        for idx in np.ndindex(6, 6, 6):
            w = b3(p[0] - idx[0]) * b3(p[1] - idx[1]) * b3(p[2] - idx[2])
            want[n] += w * coeffs[idx]
    got, _ = ck.bspline_eval(coeffs, u)
    assert np.max(np.abs(got - want)) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 300), st.data())
def test_partial_shuffle_backends_identical(n, data):
    k = data.draw(st.integers(0, n))
    seed = data.draw(st.integers(0, 2 ** 32 - 1))
    u = np.random.default_rng(seed).random(k)
    a = ck.partial_shuffle(n, k, u)
    b = _pykernels.partial_shuffle(n, k, u)
    assert np.array_equal(a, b)
    assert len(set(a.tolist())) == k
    assert np.all((a >= 0) & (a < n))


def test_partial_shuffle_guards_rounding():
    u = np.full(5, np.nextafter(1.0, 0.0))
    out = _pykernels.partial_shuffle(5, 5, u)
    assert sorted(out.tolist()) == [0, 1, 2, 3, 4]


def test_pure_python_backend_selected_by_env():
    env = dict(os.environ, COORDFIT_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c",
                          "import coordfit._kernels as k; print(k.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
