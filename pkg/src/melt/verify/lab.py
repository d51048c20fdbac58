"""Gate Jacobian analysis, gradient-superhighway probes and equivalence checks.

Jacobian layout: ``J[i, j] = d h_t[i] / d h_{t-1}[j]`` for row vectors and the
update ``h = z * h_prev + (1 - z) * x`` with ``z = sigmoid(x W + h_prev U + b)``.
The pre-activation of unit i reads column i of U, so
``dz/dh_prev = diag(sigmoid') @ U.T`` and

    J = diag(z) + diag(h_prev - x) diag(sigmoid') U.T + diag(1 - z) dx/dh_prev.

With x held fixed (the idealised per-loop setting) the last term is zero.
:func:`full_loop_jacobian` measures the real thing, where x at loop t depends
on the previous latent through that loop's attention.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .. import tensor as tn
from ..config import ModelConfig
from ..looplm import LoopLM, ShareStrategy
from ..melt import GateParams, MeltLM, gate_preactivation, mix
from ..memory import CacheMode, analytic_kv_elements
from ..tensor import Tensor
from .reference import looplm_reference, melt_reference

POWER_TOL = 1e-12
POWER_MAX_ITER = 2_000
POWER_WINDOW = 64
POWER_SQUARINGS = 20
POWER_RESID = 1e-6


def _arr(t):
    return np.asarray(getattr(t, "data", t), dtype=np.float64)


def _sig(u):
    return tn.sigmoid_np(u)


@dataclass
class JacobianReport:
    J: np.ndarray
    term1: np.ndarray
    term2: np.ndarray
    term3: np.ndarray
    spectral_radius: float
    deviation: float  # ||J - I||_F


def gate_jacobian(x, h_prev, gp: GateParams, dx_dh=None) -> JacobianReport:
    """Analytic Jacobian of one gated update at a single token row."""
    x, h = _arr(x), _arr(h_prev)
    W, U, b = _arr(gp.w_z), _arr(gp.u_z), _arr(gp.b_z)
    d = x.shape[-1]
    if x.shape != (d,) or h.shape != (d,):
        raise tn.DimensionError(f"gate_jacobian wants (d,) vectors, got {x.shape} and {h.shape}")
    z = _sig(x @ W + h @ U + b)
    dz = z * (1.0 - z)
    term1 = np.diag(z)
    term2 = ((h - x) * dz)[:, None] * U.T
    term3 = np.zeros((d, d)) if dx_dh is None else (1.0 - z)[:, None] * _arr(dx_dh)
    J = term1 + term2 + term3
    return JacobianReport(J, term1, term2, term3, spectral_radius(J),
                          float(np.linalg.norm(J - np.eye(d))))


def fd_jacobian(fn, h, eps: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of ``fn: (d,) -> (m,)``."""
    h = _arr(h)
    cols = []
    for j in range(h.shape[0]):
        e = np.zeros_like(h)
        e[j] = eps
        cols.append((fn(h + e) - fn(h - e)) / (2 * eps))
    return np.stack(cols, axis=1)


def gate_map(x, gp: GateParams):
    """h_prev -> h for fixed x, in plain numpy."""
    x, W, U, b = _arr(x), _arr(gp.w_z), _arr(gp.u_z), _arr(gp.b_z)

    def f(h):
        z = _sig(x @ W + h @ U + b)
        return z * h + (1.0 - z) * x

    return f


def spectral_radius(J, tol: float = POWER_TOL, max_iter: int = POWER_MAX_ITER) -> float:
    """Largest |eigenvalue| by power iteration.

    Gate Jacobians have tightly clustered spectra, so plain iteration on ``J``
    crawls. We iterate on ``B = J**m`` with ``m = 2**POWER_SQUARINGS`` (built
    by rescaled repeated squaring) and return ``rho(B) ** (1/m)``; this raises
    the gap ratio to the m-th power without changing the fixed point.

    Iteration runs on a two-column block, ``V <- orth(B V)``, so a complex
    conjugate dominant pair (common for non-symmetric gate Jacobians) is
    captured instead of making a single vector oscillate. The estimate is the
    largest |eigenvalue| of the 2x2 Rayleigh quotient ``V^T B V``; iteration
    stops once it changes by less than ``tol`` (relative) on consecutive
    steps and the dominant Ritz pair ``(lam, u)`` has residual
    ``||B u - lam u|| <= POWER_RESID * |lam|``. If it has not settled after
    ``max_iter`` steps (a cluster of dominant eigenvalues with nearly equal
    modulus, e.g. a gate Jacobian close to saturation) the geometric mean of
    the last ``POWER_WINDOW`` block growth factors is used. That converges to
    the radius by Gelfand's formula, and the m-th root shrinks its error by m.
    """
    A = _arr(J)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise tn.DimensionError(f"spectral_radius needs a square matrix, got {A.shape}")
    n = A.shape[0]
    if n == 0:
        return 0.0
    B, log_scale = A, 0.0  # B == A**(2**k) / exp(log_scale)
    for _ in range(POWER_SQUARINGS):
        c = float(np.abs(B).max())
        if c == 0.0:
            return 0.0
        B = (B / c) @ (B / c)
        log_scale = 2.0 * (log_scale + math.log(c))
    m = 2 ** POWER_SQUARINGS
    if n == 1:
        return abs(float(B[0, 0])) ** (1.0 / m) * math.exp(log_scale / m)
    V, _ = np.linalg.qr(np.random.default_rng(12345).standard_normal((n, 2)))
    growth = []
    prev = None
    rho_b = None
    for _ in range(max_iter):
        W = B @ V
        Q, R = np.linalg.qr(W)
        g = math.sqrt(abs(R[0, 0] * R[1, 1]))  # block growth: |det| ** (1/2)
        BQ = B @ Q
        H = Q.T @ BQ
        lam, Y = np.linalg.eig(H)
        k = int(np.argmax(np.abs(lam)))
        est = float(abs(lam[k]))
        if est == 0.0:
            return 0.0
        growth.append(g)
        u = Q @ Y[:, k]
        resid = float(np.linalg.norm(BQ @ Y[:, k] - lam[k] * u) / np.linalg.norm(u))
        if prev is not None and abs(est - prev) <= tol * est and resid <= POWER_RESID * est:
            rho_b = est
            break
        prev = est
        V = Q
    if rho_b is None:
        rho_b = float(np.exp(np.mean(np.log(growth[-POWER_WINDOW:]))))
    return math.exp((math.log(rho_b) + log_scale) / m)


# ---------------------------------------------------------------------------
# superhighway


class SaturationError(ValueError):
    pass


def saturating_bias(epsilon: float, margin: float = 4.0) -> float:
    """Bias that puts every gate above ``1 - epsilon`` for small W, U."""
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    p = 1.0 - epsilon / 2
    return math.log(p / (1.0 - p)) + margin


def probe_gate(d: int, bias: float, seed: int = 0, scale: float = 0.02) -> GateParams:
    rng = np.random.default_rng(seed)
    return GateParams(
        Tensor(rng.uniform(-scale, scale, (d, d))),
        Tensor(rng.uniform(-scale, scale, (d, d))),
        Tensor(np.full(d, float(bias))),
    )


def superhighway_check(gp: GateParams, T: int, epsilon: float, seed: int = 0,
                       clamp: bool = False) -> float:
    """Gradient norm ratio ||dL/dh_0|| / ||dL/dh_T|| through T gated updates.

    The loss is ``0.5 * ||h_T||^2`` so ``dL/dh_T = h_T``. Inputs x_t are drawn
    once per loop and held fixed. With ``clamp`` the gate is the constant 1
    and the ratio is exactly 1. Otherwise every gate value must be at least
    ``1 - epsilon``; the first violation raises :class:`SaturationError`.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    d = _arr(gp.b_z).shape[0]
    rng = np.random.default_rng(seed)
    xs = rng.standard_normal((T, 1, d))
    h0 = Tensor(rng.standard_normal((1, d)), requires_grad=True)
    with tn.Tape() as tape:
        h = h0
        for t in range(T):
            if clamp:
                z = Tensor(np.ones((1, d)))
            else:
                z = tn.sigmoid(gate_preactivation(Tensor(xs[t]), h, gp))
                low = z.data[0] < 1.0 - epsilon
                if low.any():
                    j = int(np.flatnonzero(low)[0])
                    raise SaturationError(
                        f"gate not saturated at loop {t + 1}, dim {j}: z={z.data[0, j]:.6g} < 1-eps={1 - epsilon:.6g}"
                    )
            h = mix(z, h, Tensor(xs[t]))
        loss = tn.scale(tn.sum(tn.mul(h, h)), 0.5)
    tn.backward(loss, tape)
    return float(np.linalg.norm(h0.grad) / np.linalg.norm(h.data))


# ---------------------------------------------------------------------------
# full-network loop Jacobian


class _Perturbed(MeltLM):
    """Adds ``delta`` to the latent produced at (layer, loop) and records the next update."""

    def __init__(self, base: MeltLM, layer: int, loop: int):
        super().__init__(base.config, base.params, variant=base.variant)
        self.where = (layer, loop)
        self.delta = None
        self.inputs = None  # (x, h_prev) seen by the measured update
        self.captured = None

    def update_latent(self, l, x, h_prev, t):
        h = super().update_latent(l, x, h_prev, t)
        if (l, t) == self.where and self.delta is not None:
            h = tn.add(h, self.delta)
        if (l, t) == (self.where[0], self.where[1] + 1):
            self.inputs = (x.data.reshape(-1).copy(), h_prev.data.reshape(-1).copy())
            self.captured = h.data.reshape(-1).copy()
        return h


def full_loop_jacobian(model: MeltLM, tokens, layer: int, loop: int, eps: float = 1e-6):
    """d h_{loop+1} / d h_loop for the newest token, through the whole network.

    ``loop`` is 1-based and must be at least 2 so the perturbed latent is a
    gate output. Returns ``(J_full, report)`` where ``report`` is the
    idealised three-term Jacobian at the same point with x held fixed.
    """
    T = model.config.loops
    if not 2 <= loop < T:
        raise ValueError(f"loop must satisfy 2 <= loop < T={T}")
    tokens = list(tokens)
    probe = _Perturbed(model, layer, loop)
    sess = probe.session()
    for tok in tokens[:-1]:
        sess.step(tok)
    d = model.config.hidden_dim

    snap = copy.deepcopy(sess.state)
    last = np.array([[tokens[-1]]])
    probe.run_chunk(copy.deepcopy(snap), last, len(tokens) - 1)
    x0, h0 = probe.inputs

    def f(delta):
        probe.delta = Tensor(delta.reshape(1, 1, d))
        probe.run_chunk(copy.deepcopy(snap), last, len(tokens) - 1)
        probe.delta = None
        return probe.captured

    J_full = fd_jacobian(f, np.zeros(d), eps)
    return J_full, gate_jacobian(x0, h0, model.gate(layer))


# ---------------------------------------------------------------------------
# reports


@dataclass
class CheckResult:
    name: str
    status: str  # "pass", "fail" or "info"
    metric: float
    tolerance: float
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.status != "fail"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _check(name, metric, tol, ok=None, detail=""):
    metric = float(metric)
    if ok is None:
        ok = metric <= tol
    return CheckResult(name, "pass" if ok else "fail", metric, float(tol), detail)


def _logit(p):
    return math.log(p / (1.0 - p))


def jacobian_suite(d: int = 16, trials: int = 100, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    split = 0.0
    for _ in range(trials):
        gp = probe_gate(d, rng.normal(), int(rng.integers(1 << 30)), scale=0.5)
        x, h = rng.standard_normal(d), rng.standard_normal(d)
        rep = gate_jacobian(x, h, gp)
        fd = fd_jacobian(gate_map(x, gp), h)
        worst = max(worst, tn.relative_error(rep.J, fd))
        split = max(split, float(np.abs(rep.J - (rep.term1 + rep.term2 + rep.term3)).max()))
    out = [_check("jacobian_matches_fd", worst, 1e-5), _check("jacobian_terms_sum", split, 1e-12)]

    x, h = rng.standard_normal(d), rng.standard_normal(d)
    sat = gate_jacobian(x, h, probe_gate(d, 40.0, 1))
    out.append(_check("saturated_jacobian_identity", sat.deviation, 1e-10))
    closed = gate_jacobian(x, h, probe_gate(d, -40.0, 1))
    out.append(_check("closed_gate_jacobian_zero", np.linalg.norm(closed.J), 1e-10))

    devs = [gate_jacobian(x, h, probe_gate(d, b, 2)).deviation for b in (0.0, 5.0, 10.0, 20.0, 40.0)]
    rises = max(0.0, max(b - a for a, b in zip(devs, devs[1:])))
    out.append(_check("saturation_monotone", rises, 0.0, detail=json.dumps([round(v, 12) for v in devs])))

    worst_rho = 0.0
    for _ in range(20):
        gp = probe_gate(d, rng.normal() * 3, int(rng.integers(1 << 30)))
        worst_rho = max(worst_rho, gate_jacobian(rng.standard_normal(d), rng.standard_normal(d), gp).spectral_radius)
    out.append(_check("spectral_radius_bounded", worst_rho, 1.0 + 1e-9,
                      detail="x fixed, |U| <= 0.02 elementwise"))

    A = rng.standard_normal((8, 8))
    A = A + A.T
    ref = float(np.abs(np.linalg.eigvalsh(A)).max())
    out.append(_check("spectral_radius_vs_eig", abs(spectral_radius(A) - ref) / ref, 1e-6))
    return out


def superhighway_suite(seed: int = 0, d: int = 16) -> list[CheckResult]:
    out = []
    worst = 0.0
    for T in (1, 2, 4, 8, 16, 32, 64):
        r = superhighway_check(probe_gate(d, 0.0, seed), T, 0.0, seed=seed, clamp=True)
        worst = max(worst, abs(r - 1.0))
    out.append(_check("clamped_ratio_exactly_one", worst, 0.0))

    eps, T = 1e-3, 8
    sat = superhighway_check(probe_gate(d, saturating_bias(eps), seed), T, eps, seed=seed)
    lo = (1.0 - eps) ** T - 1e-6
    out.append(_check("saturated_ratio_bound", sat, lo, ok=lo <= sat <= 1.0 + 1e-6,
                      detail=f"need {lo:.9f} <= ratio <= 1+1e-6"))

    ctl = superhighway_check(probe_gate(d, 0.0, seed), 16, 1.0 - 1e-9, seed=seed)
    out.append(_check("unsaturated_control_lower", ctl, sat, ok=ctl < sat,
                      detail="z ~ 0.5, T=16; ratio must fall below the saturated case"))
    return out


class MiswiredMeltLM(MeltLM):
    """Negative control: the gate pre-activation reads h through W and x through U."""

    def update_latent(self, l, x, h_prev, t):
        if self.variant != "gated":
            return super().update_latent(l, x, h_prev, t)
        z = tn.sigmoid(gate_preactivation(h_prev, x, self.gate(l)))
        return mix(z, h_prev, x)


def _max_diff(a, b):
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def _stack(logits):
    return np.stack([lg.data[0] for lg in logits])


def equivalence_suite(model: MeltLM | None = None, seed: int = 0, inject_fault: bool = False,
                      length: int = 12, memory_lengths=(16, 64), memory_loops=(1, 2, 4)) -> list[CheckResult]:
    """Cross-module oracles on a tiny model (or the one given)."""
    if model is None:
        cfg = ModelConfig(n_layers=2, hidden_dim=64, n_heads=4, loops=3, vocab_size=32)
        model = MeltLM(cfg, seed=seed)
    if inject_fault:
        model = MiswiredMeltLM(model.config, model.params, variant=model.variant)
    cfg = model.config
    rng = np.random.default_rng(seed)
    toks = rng.integers(0, cfg.vocab_size, length)
    base = LoopLM(cfg, model.params)
    out = []

    ref_loop = _stack(base.loop_forward(toks[None]).logits)
    a0 = _stack(model.chunk_forward(toks[None], 4, alpha=0.0).logits)
    out.append(_check("alpha0_equals_looplm", _max_diff(a0, ref_loop), 1e-9))

    # bit-exact needs identical matmul shapes: one parallel pass, then token by token
    t1 = model.melt_forward(toks[None], loops=1).logits[0].data
    diff = _max_diff(t1, base.loop_forward(toks[None], loops=1).logits[0].data)
    c1cfg = cfg.with_loops(1)
    sm, sb = type(model)(c1cfg, model.params, variant=model.variant).session(), LoopLM(c1cfg, model.params).session()
    for t in toks:
        diff = max(diff, _max_diff(sm.step(int(t))[0], sb.step(int(t))[0]))
    out.append(_check("t1_equals_looplm", diff, 0.0))

    c1 = _stack(model.chunk_forward(toks[None], 1).logits)
    sess = model.session()
    ar = np.stack([sess.step(int(t)) for t in toks], axis=1)
    out.append(_check("chunk1_equals_autoregressive", _max_diff(c1, ar), 1e-10))

    ema = MeltLM(cfg, model.params, variant="ema")
    fixed = {k: v for k, v in model.params.items()}
    for l in range(cfg.n_layers):
        fixed[f"gate.{l}.w_z"] = Tensor(np.zeros((cfg.hidden_dim, cfg.hidden_dim)))
        fixed[f"gate.{l}.u_z"] = Tensor(np.zeros((cfg.hidden_dim, cfg.hidden_dim)))
        fixed[f"gate.{l}.b_z"] = Tensor(np.full(cfg.hidden_dim, _logit(0.2)))
    gated = type(model)(cfg, fixed, variant="gated")
    out.append(_check("ema_equals_fixed_gate",
                      _max_diff(_stack(ema.chunk_forward(toks[None], 4).logits),
                                _stack(gated.chunk_forward(toks[None], 4).logits)), 1e-12))

    mref = melt_reference(model.params, cfg, toks, variant=model.variant)
    out.append(_check("melt_matches_reference", _max_diff(c1, mref), 1e-10))
    lref = looplm_reference(model.params, cfg, toks)
    out.append(_check("looplm_matches_reference", _max_diff(ref_loop, lref), 1e-10))

    traced = model.chunk_forward(toks[None], 3, trace=True).state
    stale = sum(int((counts != cfg.loops).sum()) for _, counts in traced.reads)
    out.append(_check("chunk_boundary_final_reads", stale, 0))

    out.extend(memory_law_checks(model, memory_lengths, memory_loops, seed))
    return out


def memory_law_checks(model: LoopLM, lengths=(16, 64), loops=(1, 2, 4), seed: int = 0) -> list[CheckResult]:
    cfg = model.config
    rng = np.random.default_rng(seed + 1)
    out = []
    spread = 0
    looplm_off = 0
    analytic_off = 0
    for L in lengths:
        toks = rng.integers(0, cfg.vocab_size, L)
        melt_counts, loop_counts = [], []
        for T in loops:
            c = cfg.with_loops(T)
            m = MeltLM(c, model.params, variant=getattr(model, "variant", "gated"))
            ms = m.session()
            b = LoopLM(c, model.params).session(ShareStrategy.parse("none"))
            for t in toks:
                ms.step(int(t))
                b.step(int(t))
            melt_counts.append(ms.kv_elements())
            loop_counts.append(b.kv_elements())
            analytic_off += abs(ms.kv_elements() - analytic_kv_elements(c.n_layers, c.hidden_dim, L, T, CacheMode.SHARED))
            analytic_off += abs(b.kv_elements() - analytic_kv_elements(c.n_layers, c.hidden_dim, L, T, CacheMode.PER_LOOP))
        spread = max(spread, max(melt_counts) - min(melt_counts))
        looplm_off += sum(abs(n - T * loop_counts[0] // loops[0]) for n, T in zip(loop_counts, loops))
    out.append(_check("melt_memory_constant_in_T", spread, 0))
    out.append(_check("looplm_memory_linear_in_T", looplm_off, 0))
    out.append(_check("live_counts_match_analytic", analytic_off, 0))
    return out


def full_network_report(model: MeltLM | None = None, seed: int = 0) -> list[CheckResult]:
    """Measured full-network loop Jacobian next to the idealised one (no assertion)."""
    if model is None:
        model = MeltLM(ModelConfig(loops=3), seed=seed)
    rng = np.random.default_rng(seed)
    toks = rng.integers(0, model.config.vocab_size, 6)
    J, rep = full_loop_jacobian(model, toks, 0, 2)
    gap = float(np.linalg.norm(J - rep.J))
    return [
        CheckResult("full_network_spectral_radius", "info", spectral_radius(J), 0.0),
        CheckResult("full_minus_idealised_fro", "info", gap, 0.0,
                    detail="size of the x-through-attention term"),
    ]


SUITES = {
    "jacobian": lambda: jacobian_suite() + full_network_report(),
    "superhighway": superhighway_suite,
    "equivalence": equivalence_suite,
}


def run_suite(name: str, inject_fault: bool = False) -> list[CheckResult]:
    if name == "all":
        return run_suite("jacobian") + run_suite("superhighway") + run_suite("equivalence", inject_fault)
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; choose from {sorted(SUITES) + ['all']}")
    if name == "equivalence":
        return equivalence_suite(inject_fault=inject_fault)
    return SUITES[name]()
