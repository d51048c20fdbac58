"""Looped transformer baseline with an append-only per-loop KV cache.

The N-layer stack is reapplied ``loops`` times per token. Every loop of
every layer owns its own K/V rows, so the cache holds N * L * T * 2 * d
values after L tokens. Generation also supports the untrained cache-sharing
strategies where only one loop's K/V is kept for later tokens.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .config import ModelConfig
from .tensor import Tensor


class ShareMode(str, enum.Enum):
    NONE = "none"
    FIRST_LOOP = "first_loop"
    LAST_LOOP = "last_loop"


@dataclass(frozen=True)
class ShareStrategy:
    mode: ShareMode = ShareMode.NONE
    keep_prompt_cache: bool = False

    @classmethod
    def parse(cls, mode, keep_prompt_cache=False):
        return cls(ShareMode(mode), bool(keep_prompt_cache))


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    d, V, f = cfg.hidden_dim, cfg.vocab_size, cfg.hidden_dim * cfg.ffn_mult
    std = 0.02
    out_std = std / math.sqrt(2 * cfg.n_layers * cfg.loops)
    p = {"embed": rng.normal(0.0, std, (V, d))}
    for l in range(cfg.n_layers):
        pre = f"layers.{l}."
        p[pre + "norm1"] = np.ones(d)
        p[pre + "wq"] = rng.normal(0.0, std, (d, d))
        p[pre + "wk"] = rng.normal(0.0, std, (d, d))
        p[pre + "wv"] = rng.normal(0.0, std, (d, d))
        p[pre + "wo"] = rng.normal(0.0, out_std, (d, d))
        p[pre + "norm2"] = np.ones(d)
        p[pre + "w1"] = rng.normal(0.0, std, (d, f))
        p[pre + "b1"] = np.zeros(f)
        p[pre + "w2"] = rng.normal(0.0, out_std, (f, d))
        p[pre + "b2"] = np.zeros(d)
    p["norm_f"] = np.ones(d)
    p["lm_head"] = rng.normal(0.0, std, (d, V))
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


@dataclass
class LoopKVCache:
    """K[l][t], V[l][t]: (tokens, d) arrays, one pair per layer and loop."""

    n_layers: int
    loops: int
    K: list = field(default_factory=list)
    V: list = field(default_factory=list)

    def __post_init__(self):
        if not self.K:
            self.K = [[None] * self.loops for _ in range(self.n_layers)]
            self.V = [[None] * self.loops for _ in range(self.n_layers)]

    def append(self, l, t, k: np.ndarray, v: np.ndarray):
        self.K[l][t] = k if self.K[l][t] is None else np.concatenate([self.K[l][t], k], axis=-2)
        self.V[l][t] = v if self.V[l][t] is None else np.concatenate([self.V[l][t], v], axis=-2)

    def tokens(self, l=0, t=0) -> int:
        k = self.K[l][t]
        return 0 if k is None else k.shape[-2]

    def element_count(self) -> int:
        return sum(
            (k.size if k is not None else 0) + (v.size if v is not None else 0)
            for kl, vl in zip(self.K, self.V)
            for k, v in zip(kl, vl)
        )


@dataclass
class LoopOutput:
    logits: list  # per loop, Tensor (B, L, vocab)
    post_attn: list  # [layer][loop] Tensor (B, L, d)
    cache: LoopKVCache | None = None


def _heads(x: Tensor, n_heads: int) -> Tensor:
    B, L, d = x.shape
    return tn.transpose(tn.reshape(x, (B, L, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge(x: Tensor) -> Tensor:
    B, H, L, dh = x.shape
    return tn.reshape(tn.transpose(x, (0, 2, 1, 3)), (B, L, H * dh))


def causal_mask(q_pos, k_pos) -> np.ndarray:
    return np.asarray(k_pos)[None, :] <= np.asarray(q_pos)[:, None]


class LoopLM:
    kind = "looplm"

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)

    # -- parameter access -------------------------------------------------

    def named_parameters(self):
        return list(self.params.items())

    def parameters(self):
        return list(self.params.values())

    def p(self, name: str) -> Tensor:
        return self.params[name]

    def lp(self, l: int, name: str) -> Tensor:
        return self.params[f"layers.{l}.{name}"]

    # -- pieces -------------------------------------------------------------

    def embed(self, tokens) -> Tensor:
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.size == 0:
            return Tensor(np.zeros(ids.shape + (self.config.hidden_dim,)))
        return tn.embedding(self.p("embed"), ids)

    def norm1(self, l: int, x: Tensor) -> Tensor:
        return tn.rms_norm(x, self.lp(l, "norm1"), self.config.norm_eps)

    def project_kv(self, l: int, h: Tensor) -> tuple[Tensor, Tensor]:
        return tn.matmul(h, self.lp(l, "wk")), tn.matmul(h, self.lp(l, "wv"))

    def attend(self, l, x, xn, K, V, q_pos, k_pos) -> tuple[Tensor, Tensor]:
        """Attention from queries of ``xn`` over pre-rotary K/V, then the FFN.

        Returns ``(x_next, x_attn)``; ``x_attn`` is the post-attention residual.
        """
        cfg = self.config
        if K.shape[-2] != len(k_pos):
            raise ValueError(f"cache holds {K.shape[-2]} rows but {len(k_pos)} key positions given")
        q = tn.rope(_heads(tn.matmul(xn, self.lp(l, "wq")), cfg.n_heads), q_pos, cfg.rope_base)
        k = tn.rope(_heads(K, cfg.n_heads), k_pos, cfg.rope_base)
        v = _heads(V, cfg.n_heads)
        scores = tn.scale(tn.matmul(q, tn.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(cfg.head_dim))
        probs = tn.softmax_rows(scores, causal_mask(q_pos, k_pos))
        att = tn.matmul(_merge(tn.matmul(probs, v)), self.lp(l, "wo"))
        x_attn = tn.add(x, att)
        hn = tn.rms_norm(x_attn, self.lp(l, "norm2"), cfg.norm_eps)
        ff = tn.gelu(tn.add(tn.matmul(hn, self.lp(l, "w1")), self.lp(l, "b1")))
        ff = tn.add(tn.matmul(ff, self.lp(l, "w2")), self.lp(l, "b2"))
        return tn.add(x_attn, ff), x_attn

    def block_forward(self, l, x: Tensor, K_prev=None, V_prev=None, positions=None):
        """One layer with an optional prior cache. Returns (x_next, x_attn, k, v)."""
        Lq = x.shape[-2]
        prior = 0 if K_prev is None else K_prev.shape[-2]
        if positions is None:
            positions = np.arange(prior, prior + Lq)
        positions = np.asarray(positions)
        if len(positions) != Lq or (Lq and positions[0] != prior):
            raise ValueError(
                f"positions {positions.tolist()} do not follow a cache of {prior} tokens"
            )
        xn = self.norm1(l, x)
        k, v = self.project_kv(l, xn)
        if K_prev is not None:
            K = tn.concat([K_prev, k], axis=-2)
            V = tn.concat([V_prev, v], axis=-2)
        else:
            K, V = k, v
        x_next, x_attn = self.attend(l, x, xn, K, V, positions, np.arange(prior + Lq))
        return x_next, x_attn, k, v

    def lm_head(self, x: Tensor) -> Tensor:
        xf = tn.rms_norm(x, self.p("norm_f"), self.config.norm_eps)
        return tn.matmul(xf, self.p("lm_head"))

    # -- full forward -------------------------------------------------------

    def transformer_forward(self, tokens) -> Tensor:
        """Single pass through the N-layer stack (a plain transformer)."""
        ids = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        x = self.embed(ids)
        for l in range(self.config.n_layers):
            x, _, _, _ = self.block_forward(l, x)
        return self.lm_head(x)

    def loop_forward(self, tokens, loops: int | None = None, keep_cache: bool = False) -> LoopOutput:
        """Teacher-forced forward over a (B, L) batch, all positions in parallel."""
        T = self.config.loops if loops is None else loops
        if T < 1:
            raise ValueError("loops must be >= 1")
        N = self.config.n_layers
        ids = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        x = self.embed(ids)
        logits, post = [], [[None] * T for _ in range(N)]
        cache = LoopKVCache(N, T) if keep_cache else None
        for t in range(T):
            for l in range(N):
                x, x_attn, k, v = self.block_forward(l, x)
                post[l][t] = x_attn
                if cache is not None:
                    cache.append(l, t, k.data, v.data)
            logits.append(self.lm_head(x))
        return LoopOutput(logits, post, cache)

    # -- incremental decoding ----------------------------------------------

    def session(self, strategy: ShareStrategy | None = None) -> "LoopLMSession":
        return LoopLMSession(self, strategy or ShareStrategy())

    def generate(self, prompt, max_new: int, strategy=None, seed: int = 0,
                 temperature: float = 0.0, top_p: float = 1.0) -> "GenerationResult":
        return run_generation(self.session(strategy), prompt, max_new, seed, temperature, top_p)


class LoopLMSession:
    """Token-by-token decoding state for one sequence (batch of 1)."""

    def __init__(self, model: LoopLM, strategy: ShareStrategy):
        self.model = model
        self.strategy = strategy
        cfg = model.config
        self.T = cfg.loops
        self.N = cfg.n_layers
        d = cfg.hidden_dim
        # per-loop rows (exact cache; also used for the kept prompt)
        self.full = LoopKVCache(self.N, self.T)
        # shared rows, one designated loop per token
        self.shared_K = [np.zeros((0, d)) for _ in range(self.N)]
        self.shared_V = [np.zeros((0, d)) for _ in range(self.N)]
        self.length = 0
        self.in_prompt = True

    def end_prompt(self):
        self.in_prompt = False

    def _exact_for_this_token(self) -> bool:
        s = self.strategy
        return s.mode is ShareMode.NONE or (s.keep_prompt_cache and self.in_prompt)

    def _prior(self, l, t):
        parts_k, parts_v = [], []
        if self.full.K[l][t] is not None:
            parts_k.append(self.full.K[l][t])
            parts_v.append(self.full.V[l][t])
        if self.strategy.mode is not ShareMode.NONE and self.shared_K[l].shape[0]:
            parts_k.append(self.shared_K[l])
            parts_v.append(self.shared_V[l])
        if not parts_k:
            return None, None
        K = np.concatenate(parts_k, axis=0) if len(parts_k) > 1 else parts_k[0]
        V = np.concatenate(parts_v, axis=0) if len(parts_v) > 1 else parts_v[0]
        return Tensor(K[None]), Tensor(V[None])

    def step(self, token: int) -> list[np.ndarray]:
        """Feed one token; returns its per-loop logits as (vocab,) arrays."""
        m = self.model
        pos = np.array([self.length])
        x = m.embed(np.array([[token]]))
        out, kv = [], [[None] * self.T for _ in range(self.N)]
        for t in range(self.T):
            for l in range(self.N):
                Kp, Vp = self._prior(l, t)
                x, _, k, v = m.block_forward(l, x, Kp, Vp, pos)
                kv[l][t] = (k.data[0], v.data[0])
            out.append(m.lm_head(x).data[0, 0])
        exact = self._exact_for_this_token()
        keep_t = 0 if self.strategy.mode is ShareMode.FIRST_LOOP else self.T - 1
        for l in range(self.N):
            if exact:
                for t in range(self.T):
                    self.full.append(l, t, *kv[l][t])
            else:
                k, v = kv[l][keep_t]
                self.shared_K[l] = np.concatenate([self.shared_K[l], k], axis=0)
                self.shared_V[l] = np.concatenate([self.shared_V[l], v], axis=0)
        self.length += 1
        return out

    def kv_elements(self) -> int:
        return self.full.element_count() + sum(k.size + v.size for k, v in zip(self.shared_K, self.shared_V))

    def latent_elements(self) -> int:
        return 0


@dataclass
class GenerationResult:
    tokens: list
    step_logits: list = field(repr=False)  # final-loop logits per fed position
    kv_elements: int = 0
    latent_elements: int = 0


def sample_next(logits: np.ndarray, rng: np.random.Generator, temperature: float, top_p: float) -> int:
    if temperature <= 0.0:
        return int(np.argmax(logits))
    z = logits / temperature
    z = z - z.max()
    p = np.exp(z)
    p /= p.sum()
    order = np.argsort(-p, kind="stable")
    cum = np.cumsum(p[order])
    keep = order[: int(np.searchsorted(cum, top_p) + 1)]
    q = p[keep] / p[keep].sum()
    return int(keep[rng.choice(len(keep), p=q)])


def run_generation(session, prompt, max_new, seed=0, temperature=0.0, top_p=1.0) -> GenerationResult:
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise ValueError("prompt must be non-empty")
    rng = np.random.default_rng(seed)
    step_logits = []
    for tok in prompt:
        logits = session.step(tok)
        step_logits.append(logits[-1])
    session.end_prompt()
    new = []
    for _ in range(max_new):
        nxt = sample_next(step_logits[-1], rng, temperature, top_p)
        new.append(nxt)
        # generated tokens are fed back so the cache covers the whole sequence
        step_logits.append(session.step(nxt)[-1])
    return GenerationResult(new, step_logits, session.kv_elements(), session.latent_elements())
