"""Constant-memory looped transformer: one gated latent row per token and layer.

Loop 1 appends the token's latent row ``h = x`` (``x`` being the normalised
layer input, the same vector LoopLM projects to K/V). Loops 2..T overwrite
that row through the gate and re-derive ``k = h W_K``, ``v = h W_V``. Later
tokens only ever see the final row, so the stored state is N * L * 3d values
whatever the loop count.

:func:`chunk_forward` is the training path: chunks are processed in order,
tokens inside a chunk run in parallel on their current-loop latents, and
only final latents cross chunk boundaries. A chunk of one token is exactly
incremental decoding; :class:`MeltSession` drives it token by token.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .config import GATE_VARIANTS, ModelConfig
from .looplm import GenerationResult, LoopLM, init_params, run_generation
from .tensor import Tensor

EMA_DECAY = 0.2


@dataclass
class GateParams:
    w_z: Tensor  # (d, d)
    u_z: Tensor  # (d, d)
    b_z: Tensor  # (d,)


def init_gate_params(cfg: ModelConfig, seed: int = 0, bias: float = 1.0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed + 7919)
    d = cfg.hidden_dim
    out = {}
    for l in range(cfg.n_layers):
        out[f"gate.{l}.w_z"] = rng.uniform(-0.02, 0.02, (d, d))
        out[f"gate.{l}.u_z"] = rng.uniform(-0.02, 0.02, (d, d))
        out[f"gate.{l}.b_z"] = np.full(d, bias)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in out.items()}


def gate_preactivation(x, h_prev, gp: GateParams) -> Tensor:
    return tn.add(tn.add(tn.matmul(x, gp.w_z), tn.matmul(h_prev, gp.u_z)), gp.b_z)


def _as_rows(t: Tensor):
    # gate math runs on (..., d); a bare (d,) vector is lifted to (1, d)
    return (tn.reshape(t, (1, t.shape[0])), True) if t.ndim == 1 else (t, False)


def mix(z, h_prev, x) -> Tensor:
    """z * h_prev + (1 - z) * x"""
    return tn.add(tn.mul(z, h_prev), tn.mul(tn.sub(1.0, z), x))


def gated_update(x, h_prev, gp: GateParams) -> tuple[Tensor, Tensor]:
    """Element-wise gated update; returns ``(h, z)``."""
    x, h_prev = tn.as_tensor(x), tn.as_tensor(h_prev)
    if x.shape != h_prev.shape:
        raise tn.DimensionError(f"gated_update: x {x.shape} vs h_prev {h_prev.shape}")
    xr, flat = _as_rows(x)
    hr, _ = _as_rows(h_prev)
    z = tn.sigmoid(gate_preactivation(xr, hr, gp))
    h = mix(z, hr, xr)
    if flat:
        return tn.reshape(h, x.shape), tn.reshape(z, x.shape)
    return h, z


def variant_update(variant: str, x, h_prev, t: int, gp: GateParams | None = None) -> Tensor:
    """Latent update for loop ``t`` (1-based, t >= 2) under a gating variant."""
    if variant not in GATE_VARIANTS:
        raise ValueError(f"unknown gate variant {variant!r}; expected one of {GATE_VARIANTS}")
    if t < 2:
        raise ValueError("variant_update applies from the second loop on; loop 1 sets h = x")
    x, h_prev = tn.as_tensor(x), tn.as_tensor(h_prev)
    if variant == "gated":
        return gated_update(x, h_prev, gp)[0]
    if variant == "mean":
        return tn.scale(tn.add(tn.scale(h_prev, t - 1), x), 1.0 / t)
    if variant == "ema":
        return mix(EMA_DECAY, h_prev, x)
    if variant == "last":
        return x
    # single_gated: one scalar per token from the mean pre-activation
    xr, flat = _as_rows(x)
    hr, _ = _as_rows(h_prev)
    s = tn.sigmoid(tn.mean(gate_preactivation(xr, hr, gp), axis=-1, keepdims=True))
    h = mix(s, hr, xr)
    return tn.reshape(h, x.shape) if flat else h


def interpolate_kv(kv_melt, kv_base, alpha: float) -> Tensor:
    """alpha * kv_melt + (1 - alpha) * kv_base"""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    kv_melt, kv_base = tn.as_tensor(kv_melt), tn.as_tensor(kv_base)
    if kv_melt.shape != kv_base.shape:
        raise tn.DimensionError(f"interpolate_kv: {kv_melt.shape} vs {kv_base.shape}")
    return tn.add(tn.scale(kv_melt, alpha), tn.scale(kv_base, 1.0 - alpha))


class StateError(RuntimeError):
    pass


@dataclass
class _LayerState:
    H: Tensor | None = None  # finalised rows, (B, P, d)
    K: Tensor | None = None
    V: Tensor | None = None
    h: Tensor | None = None  # in-progress rows of the current chunk
    k: Tensor | None = None
    v: Tensor | None = None
    loops_done: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


class LatentKVState:
    """Per-layer latent rows H with their derived K/V caches.

    Rows before ``finalized`` are frozen (all loops done). Rows after it
    belong to the chunk in progress and may be overwritten loop by loop.
    ``loops_done`` counts updates per row; :meth:`read` records the counts
    of the frozen rows it exposes in ``reads`` so tests can check that no
    chunk ever sees a non-final latent from an earlier chunk.
    """

    def __init__(self, n_layers: int, loops: int, trace: bool = False):
        self.n_layers = n_layers
        self.loops = loops
        self.layers = [_LayerState() for _ in range(n_layers)]
        self.finalized = 0
        self.trace = trace
        self.reads: list = []

    @property
    def rows(self) -> int:
        st = self.layers[0]
        n = 0 if st.H is None else st.H.shape[-2]
        return n + (0 if st.h is None else st.h.shape[-2])

    def append(self, l: int, h: Tensor, k: Tensor, v: Tensor):
        st = self.layers[l]
        if st.h is not None:
            raise StateError(f"layer {l}: rows already in progress; finalize before appending")
        st.h, st.k, st.v = h, k, v
        st.loops_done = np.concatenate([st.loops_done, np.ones(h.shape[-2], dtype=np.int64)])

    def update(self, l: int, h: Tensor, k: Tensor, v: Tensor, row_start: int | None = None):
        """Overwrite the in-progress rows; frozen rows cannot be touched."""
        st = self.layers[l]
        if row_start is not None and row_start < self.finalized:
            raise StateError(
                f"layer {l}: row {row_start} is final; only the newest rows may be updated"
            )
        if st.h is None or st.h.shape != h.shape:
            raise StateError(f"layer {l}: no in-progress rows of shape {h.shape}")
        st.h, st.k, st.v = h, k, v
        st.loops_done[self.finalized:] += 1

    def current(self, l: int) -> Tensor:
        return self.layers[l].h

    def read(self, l: int) -> tuple[Tensor | None, Tensor | None, Tensor, Tensor]:
        """Returns (K_prior, V_prior, k_current, v_current)."""
        st = self.layers[l]
        if self.trace and self.finalized:
            self.reads.append((l, st.loops_done[: self.finalized].copy()))
        return st.K, st.V, st.k, st.v

    def finalize(self):
        for st in self.layers:
            if st.h is None:
                continue
            if st.H is None:
                st.H, st.K, st.V = st.h, st.k, st.v
            else:
                st.H = tn.concat([st.H, st.h], axis=-2)
                st.K = tn.concat([st.K, st.k], axis=-2)
                st.V = tn.concat([st.V, st.v], axis=-2)
            st.h = st.k = st.v = None
        self.finalized = self.rows

    def arrays(self, l: int):
        st = self.layers[l]
        H = st.H if st.h is None else (st.h if st.H is None else tn.concat([st.H, st.h], axis=-2))
        K = st.K if st.k is None else (st.k if st.K is None else tn.concat([st.K, st.k], axis=-2))
        V = st.V if st.v is None else (st.v if st.V is None else tn.concat([st.V, st.v], axis=-2))
        return H.data, K.data, V.data

    def element_count(self, include_latent: bool = True) -> int:
        total = 0
        for l in range(self.n_layers):
            if self.layers[l].H is None and self.layers[l].h is None:
                continue
            H, K, V = self.arrays(l)
            total += K.size + V.size + (H.size if include_latent else 0)
        return total


@dataclass
class ChunkOutput:
    logits: list  # per loop, (B, L, vocab)
    post_attn: list  # [layer][loop], (B, L, d)
    state: LatentKVState


class MeltLM(LoopLM):
    kind = "melt"

    def __init__(self, config: ModelConfig, params=None, seed: int = 0, variant: str = "gated"):
        if variant not in GATE_VARIANTS:
            raise ValueError(f"unknown gate variant {variant!r}")
        if params is None:
            params = init_params(config, seed)
            params.update(init_gate_params(config, seed))
        super().__init__(config, params)
        self.variant = variant

    @classmethod
    def from_looplm(cls, base: LoopLM, seed: int = 0, variant: str = "gated", gate_bias: float = 1.0):
        params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in base.params.items()}
        params.update(init_gate_params(base.config, seed, gate_bias))
        return cls(base.config, params, variant=variant)

    def gate(self, l: int) -> GateParams:
        return GateParams(self.p(f"gate.{l}.w_z"), self.p(f"gate.{l}.u_z"), self.p(f"gate.{l}.b_z"))

    def gate_parameters(self):
        return [v for k, v in self.params.items() if k.startswith("gate.")]

    def update_latent(self, l: int, x: Tensor, h_prev: Tensor, t: int) -> Tensor:
        return variant_update(self.variant, x, h_prev, t, self.gate(l))

    # -- forward ------------------------------------------------------------

    def run_chunk(self, state: LatentKVState, ids: np.ndarray, start: int, alpha: float = 1.0,
                  base_cache=None, loops: int | None = None):
        """All loops of one chunk of tokens at positions ``start..``.

        ``base_cache[l][t]`` holds the LoopLM-style per-loop (K, V) of earlier
        chunks; it is required (and extended) whenever ``alpha < 1``.
        Returns per-loop logits and [layer][loop] post-attention outputs.
        """
        N = self.config.n_layers
        T = self.config.loops if loops is None else loops
        c = ids.shape[1]
        q_pos = np.arange(start, start + c)
        k_pos = np.arange(start + c)
        if state.rows != start:
            raise StateError(f"state holds {state.rows} rows but chunk starts at {start}")
        interp = alpha < 1.0
        x = self.embed(ids)
        logits, post = [], [[None] * T for _ in range(N)]
        new_base = [[None] * T for _ in range(N)] if interp else None
        for t in range(T):
            for l in range(N):
                xn = self.norm1(l, x)
                h = xn if t == 0 else self.update_latent(l, xn, state.current(l), t + 1)
                k, v = self.project_kv(l, h)
                if t == 0:
                    state.append(l, h, k, v)
                else:
                    state.update(l, h, k, v, row_start=start)
                Kp, Vp, k, v = state.read(l)
                if interp:
                    kb, vb = self.project_kv(l, xn)
                    new_base[l][t] = (kb, vb)
                    k, v = interpolate_kv(k, kb, alpha), interpolate_kv(v, vb, alpha)
                    if Kp is not None:
                        Kb, Vb = base_cache[l][t]
                        Kp, Vp = interpolate_kv(Kp, Kb, alpha), interpolate_kv(Vp, Vb, alpha)
                K = k if Kp is None else tn.concat([Kp, k], axis=-2)
                V = v if Vp is None else tn.concat([Vp, v], axis=-2)
                x, x_attn = self.attend(l, x, xn, K, V, q_pos, k_pos)
                post[l][t] = x_attn
            logits.append(self.lm_head(x))
        state.finalize()
        if interp:
            for l in range(N):
                for t in range(T):
                    kb, vb = new_base[l][t]
                    if base_cache[l][t] is None:
                        base_cache[l][t] = (kb, vb)
                    else:
                        Kb, Vb = base_cache[l][t]
                        base_cache[l][t] = (tn.concat([Kb, kb], axis=-2), tn.concat([Vb, vb], axis=-2))
        return logits, post

    def chunk_forward(self, tokens, chunk_size: int, alpha: float = 1.0,
                      loops: int | None = None, trace: bool = False) -> ChunkOutput:
        """Teacher-forced forward over a (B, L) batch in sequential chunks."""
        if chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
        ids = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        N = self.config.n_layers
        T = self.config.loops if loops is None else loops
        L = ids.shape[1]
        state = LatentKVState(N, T, trace=trace)
        base_cache = [[None] * T for _ in range(N)] if alpha < 1.0 else None
        logit_parts = [[] for _ in range(T)]
        post_parts = [[[] for _ in range(T)] for _ in range(N)]
        for s in range(0, L, chunk_size):
            lg, po = self.run_chunk(state, ids[:, s:s + chunk_size], s, alpha, base_cache, T)
            for t in range(T):
                logit_parts[t].append(lg[t])
                for l in range(N):
                    post_parts[l][t].append(po[l][t])
        logits = [tn.concat(p, axis=1) for p in logit_parts]
        post = [[tn.concat(p, axis=1) for p in row] for row in post_parts]
        return ChunkOutput(logits, post, state)

    def melt_forward(self, tokens, alpha: float = 1.0, loops: int | None = None) -> ChunkOutput:
        """Whole sequence as one chunk (fully parallel)."""
        L = np.atleast_2d(np.asarray(tokens)).shape[1]
        return self.chunk_forward(tokens, max(L, 1), alpha, loops)

    # -- decoding -------------------------------------------------------------

    def session(self, strategy=None) -> "MeltSession":
        if strategy is not None and strategy.mode.value != "none":
            raise ValueError("cache-sharing strategies apply to LoopLM checkpoints only")
        return MeltSession(self)

    def generate(self, prompt, max_new: int, strategy=None, seed: int = 0,
                 temperature: float = 0.0, top_p: float = 1.0) -> GenerationResult:
        return run_generation(self.session(strategy), prompt, max_new, seed, temperature, top_p)


class MeltSession:
    """Incremental decoding over a single latent state (batch of 1)."""

    def __init__(self, model: MeltLM, trace: bool = False):
        self.model = model
        self.state = LatentKVState(model.config.n_layers, model.config.loops, trace=trace)
        self.length = 0

    def end_prompt(self):
        pass

    def step(self, token: int) -> list[np.ndarray]:
        lg, _ = self.model.run_chunk(self.state, np.array([[token]]), self.length)
        self.length += 1
        return [x.data[0, 0] for x in lg]

    def kv_elements(self) -> int:
        return self.state.element_count(include_latent=False)

    def latent_elements(self) -> int:
        return self.state.element_count() - self.kv_elements()


def melt_token_step(model: MeltLM, token: int, state: LatentKVState, position: int):
    """Process the newest token through all loops; returns per-loop logits."""
    lg, _ = model.run_chunk(state, np.array([[token]]), position)
    return [x.data[0, 0] for x in lg]
