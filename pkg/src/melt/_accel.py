"""Row-wise numeric kernels with an optional numba path.

Every kernel exists twice: a vectorised numpy version and a loop version
compiled with ``numba.njit``. ``MELT_NUMBA=0`` forces the numpy path;
anything else uses numba when it can be imported. Both paths are
sequential and therefore deterministic, but they are not bit-identical
to each other, so a single run must stay on one path.
"""

import math
import os

import numpy as np

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


def _env_wants_numba():
    return os.environ.get("MELT_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _env_wants_numba()


# ---------------------------------------------------------------------------
# numpy reference path


def softmax_fwd_np(x, allowed):
    # x: (R, Q, K), allowed: (Q, K) bool
    z = np.where(allowed, x, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    e = np.where(allowed, e, 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_bwd_np(y, gy):
    s = (gy * y).sum(axis=-1, keepdims=True)
    return y * (gy - s)


def rms_norm_fwd_np(x, w, eps):
    # x: (R, d)
    inv = 1.0 / np.sqrt((x * x).mean(axis=-1) + eps)
    return x * inv[:, None] * w, inv


def rms_norm_bwd_np(x, w, inv, gy):
    d = x.shape[1]
    xhat = x * inv[:, None]
    gw = (gy * xhat).sum(axis=0)
    gxhat = gy * w
    dot = (gxhat * xhat).sum(axis=-1, keepdims=True)
    gx = inv[:, None] * (gxhat - xhat * dot / d)
    return gx, gw


def gelu_fwd_np(x):
    u = _SQRT_2_OVER_PI * (x + _GELU_C * (x * x * x))
    return 0.5 * x * (1.0 + np.tanh(u))


def gelu_bwd_np(x, gy):
    u = _SQRT_2_OVER_PI * (x + _GELU_C * (x * x * x))
    t = np.tanh(u)
    du = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * x * x)
    return gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def rope_np(x, cos, sin, sign):
    # x: (R, L, dh) with dh even; cos/sin: (L, dh/2); half-split pairing
    half = x.shape[-1] // 2
    a = x[..., :half]
    b = x[..., half:]
    s = sign * sin
    out = np.empty_like(x)
    out[..., :half] = a * cos - b * s
    out[..., half:] = a * s + b * cos
    return out


# ---------------------------------------------------------------------------
# numba path

if HAVE_NUMBA:
    _njit = numba.njit(cache=True, fastmath=False)

    @_njit
    def _tanh(u):
        # math.tanh does not vectorise under numba; exp does
        return 1.0 - 2.0 / (math.exp(2.0 * u) + 1.0)

    @_njit
    def softmax_fwd_nb(x, allowed):
        R, Q, K = x.shape
        out = np.zeros_like(x)
        for r in range(R):
            for i in range(Q):
                m = -np.inf
                for j in range(K):
                    if allowed[i, j] and x[r, i, j] > m:
                        m = x[r, i, j]
                s = 0.0
                for j in range(K):
                    if allowed[i, j]:
                        e = math.exp(x[r, i, j] - m)
                        out[r, i, j] = e
                        s += e
                for j in range(K):
                    out[r, i, j] /= s
        return out

    @_njit
    def softmax_bwd_nb(y, gy):
        R, Q, K = y.shape
        out = np.empty_like(y)
        for r in range(R):
            for i in range(Q):
                s = 0.0
                for j in range(K):
                    s += gy[r, i, j] * y[r, i, j]
                for j in range(K):
                    out[r, i, j] = y[r, i, j] * (gy[r, i, j] - s)
        return out

    @_njit
    def rms_norm_fwd_nb(x, w, eps):
        R, d = x.shape
        out = np.empty_like(x)
        inv = np.empty(R)
        for r in range(R):
            ss = 0.0
            for j in range(d):
                ss += x[r, j] * x[r, j]
            iv = 1.0 / math.sqrt(ss / d + eps)
            inv[r] = iv
            for j in range(d):
                out[r, j] = x[r, j] * iv * w[j]
        return out, inv

    @_njit
    def rms_norm_bwd_nb(x, w, inv, gy):
        R, d = x.shape
        gx = np.empty_like(x)
        gw = np.zeros(d)
        for r in range(R):
            iv = inv[r]
            dot = 0.0
            for j in range(d):
                xh = x[r, j] * iv
                gw[j] += gy[r, j] * xh
                dot += gy[r, j] * w[j] * xh
            for j in range(d):
                xh = x[r, j] * iv
                gx[r, j] = iv * (gy[r, j] * w[j] - xh * dot / d)
        return gx, gw

    @_njit
    def gelu_fwd_nb(x):
        flat = x.ravel()
        out = np.empty_like(flat)
        for i in range(flat.size):
            v = flat[i]
            u = _SQRT_2_OVER_PI * (v + _GELU_C * v * v * v)
            out[i] = 0.5 * v * (1.0 + _tanh(u))
        return out.reshape(x.shape)

    @_njit
    def gelu_bwd_nb(x, gy):
        flat = x.ravel()
        g = gy.ravel()
        out = np.empty_like(flat)
        for i in range(flat.size):
            v = flat[i]
            u = _SQRT_2_OVER_PI * (v + _GELU_C * v * v * v)
            t = _tanh(u)
            du = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * v * v)
            out[i] = g[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
        return out.reshape(x.shape)

    @_njit
    def rope_nb(x, cos, sin, sign):
        R, L, dh = x.shape
        half = dh // 2
        out = np.empty_like(x)
        for r in range(R):
            for i in range(L):
                for j in range(half):
                    a = x[r, i, j]
                    b = x[r, i, j + half]
                    c = cos[i, j]
                    s = sign * sin[i, j]
                    out[r, i, j] = a * c - b * s
                    out[r, i, j + half] = a * s + b * c
        return out


# ---------------------------------------------------------------------------
# dispatch


def _pick(name):
    if USE_NUMBA:
        return globals()[name + "_nb"]
    return globals()[name + "_np"]


def backend():
    return "numba" if USE_NUMBA else "numpy"


def softmax_fwd(x, allowed):
    return _pick("softmax_fwd")(np.ascontiguousarray(x), np.ascontiguousarray(allowed))


def softmax_bwd(y, gy):
    return _pick("softmax_bwd")(np.ascontiguousarray(y), np.ascontiguousarray(gy))


def rms_norm_fwd(x, w, eps):
    return _pick("rms_norm_fwd")(np.ascontiguousarray(x), np.ascontiguousarray(w), float(eps))


def rms_norm_bwd(x, w, inv, gy):
    return _pick("rms_norm_bwd")(
        np.ascontiguousarray(x), np.ascontiguousarray(w), inv, np.ascontiguousarray(gy)
    )


def gelu_fwd(x):
    return _pick("gelu_fwd")(np.ascontiguousarray(x))


def gelu_bwd(x, gy):
    return _pick("gelu_bwd")(np.ascontiguousarray(x), np.ascontiguousarray(gy))


def rope(x, cos, sin, sign=1.0):
    return _pick("rope")(
        np.ascontiguousarray(x), np.ascontiguousarray(cos), np.ascontiguousarray(sin), float(sign)
    )
