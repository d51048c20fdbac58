"""Straight-line numpy oracles, one token at a time.

These share no code with the model classes: no autodiff tensors, no
kernels, no cache objects. Each token is pushed through every loop and
layer with plain numpy, mirroring how a decoder would run on device. They
exist so the equivalence suite has something to disagree with.
"""

import math

import numpy as np


def _rms(x, w, eps):
    return x / np.sqrt(np.mean(x * x) + eps) * w


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def _sigmoid(u):
    return 0.5 * (1.0 + np.tanh(0.5 * u))


def _rotate(vec, pos, n_heads, base):
    # vec: (d,) split into heads, each rotated by angle pos * freq (half-split pairs)
    d = vec.shape[0]
    dh = d // n_heads
    half = dh // 2
    freqs = base ** (-np.arange(half) / half)
    c, s = np.cos(pos * freqs), np.sin(pos * freqs)
    out = np.empty(d)
    for h in range(n_heads):
        a = vec[h * dh:h * dh + half]
        b = vec[h * dh + half:(h + 1) * dh]
        out[h * dh:h * dh + half] = a * c - b * s
        out[h * dh + half:(h + 1) * dh] = a * s + b * c
    return out


def _layer(P, cfg, l, x, xn, keys, values, pos):
    """Attention of the newest token over ``keys``/``values`` (lists of pre-rotary rows), then FFN."""
    g = lambda n: P[f"layers.{l}.{n}"]  # noqa: E731
    H, dh = cfg.n_heads, cfg.head_dim
    q = _rotate(xn @ g("wq"), pos, H, cfg.rope_base)
    ks = np.stack([_rotate(k, j, H, cfg.rope_base) for j, k in enumerate(keys)])
    vs = np.stack(values)
    att = np.empty(cfg.hidden_dim)
    for h in range(H):
        sl = slice(h * dh, (h + 1) * dh)
        sc = ks[:, sl] @ q[sl] / math.sqrt(dh)
        w = np.exp(sc - sc.max())
        w /= w.sum()
        att[sl] = w @ vs[:, sl]
    x_attn = x + att @ g("wo")
    hn = _rms(x_attn, g("norm2"), cfg.norm_eps)
    return x_attn + _gelu(hn @ g("w1") + g("b1")) @ g("w2") + g("b2"), x_attn


def _head(P, cfg, x):
    return _rms(x, P["norm_f"], cfg.norm_eps) @ P["lm_head"]


def looplm_reference(params, cfg, tokens):
    """Per-loop logits (T, L, V) of a LoopLM decoded token by token with a per-loop cache."""
    P = {k: np.asarray(getattr(v, "data", v)) for k, v in params.items()}
    N, T = cfg.n_layers, cfg.loops
    K = [[[] for _ in range(T)] for _ in range(N)]
    V = [[[] for _ in range(T)] for _ in range(N)]
    out = np.zeros((T, len(tokens), cfg.vocab_size))
    for pos, tok in enumerate(tokens):
        x = P["embed"][tok].copy()
        for t in range(T):
            for l in range(N):
                xn = _rms(x, P[f"layers.{l}.norm1"], cfg.norm_eps)
                K[l][t].append(xn @ P[f"layers.{l}.wk"])
                V[l][t].append(xn @ P[f"layers.{l}.wv"])
                x, _ = _layer(P, cfg, l, x, xn, K[l][t], V[l][t], pos)
            out[t, pos] = _head(P, cfg, x)
    return out


def melt_reference(params, cfg, tokens, variant="gated", ema_decay=0.2):
    """Per-loop logits (T, L, V) of MELT decoded token by token with one latent row per layer."""
    P = {k: np.asarray(getattr(v, "data", v)) for k, v in params.items()}
    N, T = cfg.n_layers, cfg.loops
    H = [[] for _ in range(N)]  # final latent rows of earlier tokens
    out = np.zeros((T, len(tokens), cfg.vocab_size))
    for pos, tok in enumerate(tokens):
        x = P["embed"][tok].copy()
        cur = [None] * N
        for t in range(1, T + 1):
            for l in range(N):
                xn = _rms(x, P[f"layers.{l}.norm1"], cfg.norm_eps)
                if t == 1:
                    h = xn
                else:
                    hp = cur[l]
                    if variant == "gated":
                        z = _sigmoid(xn @ P[f"gate.{l}.w_z"] + hp @ P[f"gate.{l}.u_z"] + P[f"gate.{l}.b_z"])
                        h = z * hp + (1 - z) * xn
                    elif variant == "single_gated":
                        u = xn @ P[f"gate.{l}.w_z"] + hp @ P[f"gate.{l}.u_z"] + P[f"gate.{l}.b_z"]
                        z = _sigmoid(u.mean())
                        h = z * hp + (1 - z) * xn
                    elif variant == "mean":
                        h = ((t - 1) * hp + xn) / t
                    elif variant == "ema":
                        h = ema_decay * hp + (1 - ema_decay) * xn
                    elif variant == "last":
                        h = xn
                    else:
                        raise ValueError(variant)
                cur[l] = h
                rows = H[l] + [h]
                keys = [r @ P[f"layers.{l}.wk"] for r in rows]
                vals = [r @ P[f"layers.{l}.wv"] for r in rows]
                x, _ = _layer(P, cfg, l, x, xn, keys, vals, pos)
            out[t - 1, pos] = _head(P, cfg, x)
        for l in range(N):
            H[l].append(cur[l])
    return out
