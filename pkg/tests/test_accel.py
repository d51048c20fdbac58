import os
import subprocess
import sys

import numpy as np
import pytest

from melt import _accel

needs_numba = pytest.mark.skipif(not _accel.HAVE_NUMBA, reason="numba not installed")


def _inputs(seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 5, 7)) * 4
    allowed = rng.random((5, 7)) < 0.6
    allowed[:, 0] = True
    return rng, x, allowed


@needs_numba
def test_softmax_paths_agree():
    rng, x, allowed = _inputs()
    a = _accel.softmax_fwd_np(x, allowed)
    b = _accel.softmax_fwd_nb(x, allowed)
    np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-15)
    g = rng.standard_normal(x.shape)
    np.testing.assert_allclose(_accel.softmax_bwd_np(a, g), _accel.softmax_bwd_nb(a, g), rtol=1e-12, atol=1e-14)


@needs_numba
def test_rms_norm_paths_agree():
    rng = np.random.default_rng(1)
    x, w, g = rng.standard_normal((6, 16)), rng.standard_normal(16), rng.standard_normal((6, 16))
    ya, ia = _accel.rms_norm_fwd_np(x, w, 1e-6)
    yb, ib = _accel.rms_norm_fwd_nb(x, w, 1e-6)
    np.testing.assert_allclose(ya, yb, rtol=1e-13)
    for a, b in zip(_accel.rms_norm_bwd_np(x, w, ia, g), _accel.rms_norm_bwd_nb(x, w, ib, g)):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)


@needs_numba
def test_gelu_paths_agree():
    rng = np.random.default_rng(2)
    x, g = rng.standard_normal((4, 9)) * 5, rng.standard_normal((4, 9))
    np.testing.assert_allclose(_accel.gelu_fwd_np(x), _accel.gelu_fwd_nb(x), rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(_accel.gelu_bwd_np(x, g), _accel.gelu_bwd_nb(x, g), rtol=1e-12, atol=1e-14)


@needs_numba
def test_rope_paths_agree():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 5, 8))
    ang = np.arange(5)[:, None] * rng.random(4)[None]
    for sign in (1.0, -1.0):
        np.testing.assert_allclose(_accel.rope_np(x, np.cos(ang), np.sin(ang), sign),
                                   _accel.rope_nb(x, np.cos(ang), np.sin(ang), sign), rtol=1e-14, atol=1e-15)


def test_masked_softmax_zeros():
    _, x, allowed = _inputs()
    y = _accel.softmax_fwd(x, allowed)
    assert (y[:, ~allowed] == 0).all()


@pytest.mark.parametrize("flag,expect", [("0", "numpy"), ("off", "numpy")])
def test_env_flag_selects_numpy(flag, expect):
    env = dict(os.environ, MELT_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", "from melt import _accel; print(_accel.backend())"],
                         capture_output=True, text=True, env=env, check=True)
    assert out.stdout.strip() == expect
