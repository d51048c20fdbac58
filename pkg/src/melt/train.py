"""Two-phase recipe that converts a trained LoopLM into a MELT model.

Phase 1 runs chunk-wise forwards while blending LoopLM keys/values into the
MELT ones (``alpha`` ramps 0 -> 1) and distils the frozen LoopLM teacher at
every loop. Phase 2 runs pure MELT and adds an L2 penalty pulling each
layer/loop post-attention output toward the teacher's.

Ablations follow the removal order of the component study: naming one
component also removes every component listed before it in
``REMOVAL_ORDER``, so ``no_chunk`` is plain parallel SFT.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .config import RunConfig, TrainSchedule
from .data import Batch, batch_stream, make_corpus, prefetch
from .looplm import LoopLM
from .melt import MeltLM
from .tensor import Tape, Tensor

REMOVAL_ORDER = ("no_align", "no_interp", "no_kd", "no_chunk")


class NumericAbort(FloatingPointError):
    pass


def expand_ablation(flags) -> frozenset:
    flags = set(flags or ())
    unknown = flags - set(REMOVAL_ORDER)
    if unknown:
        raise ValueError(f"unknown ablation(s) {sorted(unknown)}; choose from {REMOVAL_ORDER}")
    if not flags:
        return frozenset()
    last = max(REMOVAL_ORDER.index(f) for f in flags)
    return frozenset(REMOVAL_ORDER[: last + 1])


# ---------------------------------------------------------------------------
# schedules


def alpha_schedule(step: int, interp_steps: int) -> float:
    if interp_steps <= 0:
        raise ValueError("interp_steps must be positive")
    if step < 0:
        raise ValueError("step must be >= 0")
    return min(step / interp_steps, 1.0)


def lr_at(step: int, total: int, base: float, warmup: int, min_ratio: float) -> float:
    """Linear warmup then cosine decay to ``base * min_ratio``."""
    if warmup > 0 and step < warmup:
        return base * (step + 1) / warmup
    span = max(total - warmup, 1)
    frac = min(max(step - warmup, 0) / span, 1.0)
    return base * (min_ratio + (1.0 - min_ratio) * 0.5 * (1.0 + math.cos(math.pi * frac)))


# ---------------------------------------------------------------------------
# optimiser


class AdamW:
    """Adam with decoupled weight decay; one lr multiplier per param group."""

    def __init__(self, groups: list[tuple[list[Tensor], float]], betas=(0.9, 0.95),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.groups = groups
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = {}
        self.v = {}

    def params(self):
        return [p for ps, _ in self.groups for p in ps]

    def step(self, lr_scale: float):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for ps, lr in self.groups:
            lr = lr * lr_scale
            for p in ps:
                if p.grad is None:
                    continue
                key = id(p)
                m = self.m.get(key)
                if m is None:
                    m = self.m[key] = np.zeros_like(p.data)
                    self.v[key] = np.zeros_like(p.data)
                v = self.v[key]
                m *= self.b1
                m += (1.0 - self.b1) * p.grad
                v *= self.b2
                v += (1.0 - self.b2) * p.grad * p.grad
                if self.wd and p.data.ndim >= 2:
                    p.data *= 1.0 - lr * self.wd
                p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params, max_norm: float) -> tuple[float, float]:
    """Scale grads in place so their global L2 norm is <= max_norm."""
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(np.vdot(p.grad, p.grad))
    raw = math.sqrt(sq)
    if not math.isfinite(raw):
        raise NumericAbort(f"gradient norm is {raw}")
    if raw > max_norm:
        s = max_norm / raw
        for p in params:
            if p.grad is not None:
                p.grad *= s
        return raw, max_norm
    return raw, raw


# ---------------------------------------------------------------------------
# losses


def _log_probs_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    n = int(mask.sum())
    if n == 0:
        raise ValueError("loss mask selects no positions")
    return tn.scale(tn.sum(tn.mul(x, mask.astype(np.float64))), 1.0 / n)


def kl_all_loops(student_logits, teacher_logits, mask) -> Tensor:
    """Mean over loops and masked positions of KL(teacher || student)."""
    if len(student_logits) != len(teacher_logits):
        raise ValueError(
            f"loop count mismatch: student {len(student_logits)} vs teacher {len(teacher_logits)}"
        )
    terms = []
    for s, t in zip(student_logits, teacher_logits):
        t = t.data if isinstance(t, Tensor) else np.asarray(t)
        lpt = _log_probs_np(t)
        pt = np.exp(lpt)
        ls = tn.log_softmax(s)
        # sum_v p_t * (log p_t - log p_s)
        kl = tn.sub(np.sum(pt * lpt, axis=-1), tn.sum(tn.mul(ls, pt), axis=-1))
        terms.append(_masked_mean(kl, mask))
    return tn.scale(_sum_terms(terms), 1.0 / len(terms))


def ce_all_loops(student_logits, targets: np.ndarray) -> Tensor:
    mask = targets >= 0
    safe = np.where(mask, targets, 0)
    terms = []
    for s in student_logits:
        nll = tn.scale(tn.gather_last(tn.log_softmax(s), safe), -1.0)
        terms.append(_masked_mean(nll, mask))
    return tn.scale(_sum_terms(terms), 1.0 / len(terms))


def _sum_terms(terms):
    out = terms[0]
    for t in terms[1:]:
        out = tn.add(out, t)
    return out


@dataclass
class LossParts:
    total: Tensor
    kd: float = 0.0
    ce: float = 0.0
    align: float = 0.0


def kd_all_loops_loss(student_logits, teacher_logits, targets, ce_weight: float = 0.5) -> LossParts:
    """KL(teacher || student) over every loop plus ``ce_weight`` * cross-entropy."""
    mask = np.asarray(targets) >= 0
    kd = kl_all_loops(student_logits, teacher_logits, mask)
    if ce_weight:
        ce = ce_all_loops(student_logits, np.asarray(targets))
        return LossParts(tn.add(kd, tn.scale(ce, ce_weight)), kd.item(), ce.item())
    return LossParts(kd, kd.item(), 0.0)


def attention_align_loss(o_melt, o_teacher, beta: float, token_mean: bool = True) -> Tensor:
    """beta / (N T) * sum over layers and loops of ||o_melt - sg(o_teacher)||^2.

    The squared norm is over the hidden axis and is averaged over tokens and
    batch when ``token_mean`` (summed otherwise). The teacher side is always
    detached.
    """
    N = len(o_melt)
    if N != len(o_teacher) or any(len(a) != len(b) for a, b in zip(o_melt, o_teacher)):
        raise ValueError("attention_align_loss: layer/loop indexing of student and teacher differ")
    T = len(o_melt[0])
    terms = []
    for l in range(N):
        for t in range(T):
            om = o_melt[l][t]
            ot = o_teacher[l][t]
            ot = ot.data if isinstance(ot, Tensor) else np.asarray(ot)
            if om.shape != ot.shape:
                raise ValueError(f"layer {l} loop {t}: shapes {om.shape} vs {ot.shape}")
            diff = tn.sub(om, ot)
            sq = tn.sum(tn.mul(diff, diff), axis=-1)
            n_tok = int(np.prod(sq.shape)) if token_mean else 1
            terms.append(tn.scale(tn.sum(sq), 1.0 / n_tok))
    return tn.scale(_sum_terms(terms), beta / (N * T))


# ---------------------------------------------------------------------------
# teacher


class TeacherHandle:
    """Frozen LoopLM: per-loop logits and post-attention outputs, never trained."""

    def __init__(self, model: LoopLM):
        self.model = model
        for p in model.parameters():
            p.requires_grad = False

    def outputs(self, inputs):
        with tn.no_grad():
            out = self.model.loop_forward(inputs)
        logits = [x.data for x in out.logits]
        post = [[x.data for x in row] for row in out.post_attn]
        return logits, post

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.model.named_parameters():
            h.update(name.encode())
            h.update(p.data.tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# steps


def make_optimizer(model: MeltLM, sched: TrainSchedule) -> AdamW:
    gates = model.gate_parameters() if isinstance(model, MeltLM) else []
    gate_ids = {id(p) for p in gates}
    rest = [p for p in model.parameters() if id(p) not in gate_ids]
    groups = [(rest, sched.lr)]
    if gates:
        groups.append((gates, sched.gate_lr))
    return AdamW(groups, (sched.adam_beta1, sched.adam_beta2), weight_decay=sched.weight_decay)


def _apply(opt: AdamW, loss: Tensor, tape: Tape, sched: TrainSchedule, lr_scale: float):
    if not math.isfinite(loss.item()):
        raise NumericAbort(f"loss is {loss.item()}")
    params = opt.params()
    tn.zero_grad(params)
    tn.backward(loss, tape)
    raw, clipped = clip_grad_norm(params, sched.grad_clip)
    opt.step(lr_scale)
    tn.zero_grad(params)
    return raw, clipped


def phase1_step(batch: Batch, model: MeltLM, teacher: TeacherHandle, sched: TrainSchedule,
                step: int, opt: AdamW, ablate=frozenset(), lr_scale: float = 1.0) -> dict:
    ablate = expand_ablation(ablate)
    alpha = 1.0 if "no_interp" in ablate else alpha_schedule(step, sched.interp_steps)
    chunk = batch.inputs.shape[1] if "no_chunk" in ablate else sched.chunk_size
    with Tape() as tape:
        out = model.chunk_forward(batch.inputs, chunk, alpha)
        if "no_kd" in ablate:
            ce = ce_all_loops(out.logits, batch.targets)
            parts = LossParts(ce, 0.0, ce.item())
        else:
            t_logits, _ = teacher.outputs(batch.inputs)
            parts = kd_all_loops_loss(out.logits, t_logits, batch.targets, sched.ce_weight)
    raw, clipped = _apply(opt, parts.total, tape, sched, lr_scale)
    return {
        "alpha": alpha,
        "loss": parts.total.item(),
        "kd": parts.kd,
        "ce": parts.ce,
        "align": 0.0,
        "grad_norm": clipped,
        "grad_norm_raw": raw,
    }


def phase2_loss(batch: Batch, model: MeltLM, teacher: TeacherHandle, sched: TrainSchedule):
    with Tape() as tape:
        out = model.chunk_forward(batch.inputs, sched.chunk_size, 1.0)
        t_logits, t_post = teacher.outputs(batch.inputs)
        parts = kd_all_loops_loss(out.logits, t_logits, batch.targets, sched.ce_weight)
        align = attention_align_loss(out.post_attn, t_post, sched.beta, sched.align_token_mean)
        total = tn.add(parts.total, align)
    return tape, LossParts(total, parts.kd, parts.ce, align.item())


def phase2_step(batch: Batch, model: MeltLM, teacher: TeacherHandle, sched: TrainSchedule,
                opt: AdamW, lr_scale: float = 1.0) -> dict:
    tape, parts = phase2_loss(batch, model, teacher, sched)
    raw, clipped = _apply(opt, parts.total, tape, sched, lr_scale)
    return {
        "alpha": 1.0,
        "loss": parts.total.item(),
        "kd": parts.kd,
        "ce": parts.ce,
        "align": parts.align,
        "grad_norm": clipped,
        "grad_norm_raw": raw,
    }


# ---------------------------------------------------------------------------
# evaluation


def token_accuracy(model: LoopLM, batch: Batch) -> float:
    """Final-loop argmax accuracy on answer tokens under inference dynamics."""
    with tn.no_grad():
        if isinstance(model, MeltLM):
            logits = model.chunk_forward(batch.inputs, 1).logits[-1].data
        else:
            logits = model.loop_forward(batch.inputs).logits[-1].data
    mask = batch.mask
    return float((logits.argmax(axis=-1)[mask] == batch.targets[mask]).mean())


# ---------------------------------------------------------------------------
# full runs


class MetricsLog:
    """One JSON object per line; ``wall_ms`` is the only non-deterministic field."""

    def __init__(self, path=None):
        self.path = path
        self.rows: list[dict] = []
        self._fh = open(path, "w", encoding="utf-8") if path else None

    def write(self, row: dict):
        self.rows.append(row)
        if self._fh:
            self._fh.write(json.dumps(row) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


def corpus_kwargs(cfg: RunConfig) -> dict:
    return {
        "n_items": cfg.seq_items,
        "n_problems": cfg.n_problems,
        "modulus": cfg.modulus,
        "vocab_size": cfg.model.vocab_size,
    }


def heldout_batch(cfg: RunConfig, seed: int) -> Batch:
    # held-out data comes from a seed range the training stream never uses
    return make_corpus(cfg.task, cfg.eval_size, 1_000_003 + seed, **corpus_kwargs(cfg))


def _row(step, phase, metrics, lr, t0):
    row = {"step": step, "phase": phase}
    row.update(metrics)
    row["lr"] = lr
    row["wall_ms"] = round((time.perf_counter() - t0) * 1000.0, 3)
    return row


def train_teacher(cfg: RunConfig, seed: int, log: MetricsLog | None = None) -> LoopLM:
    sched = cfg.schedule
    model = LoopLM(cfg.model, seed=seed)
    opt = AdamW([(model.parameters(), cfg.teacher_lr)], (sched.adam_beta1, sched.adam_beta2),
                weight_decay=sched.weight_decay)
    stream = prefetch(batch_stream(cfg.task, sched.batch_size, seed, **corpus_kwargs(cfg)))
    for step in range(cfg.teacher_steps):
        batch = next(stream)
        t0 = time.perf_counter()
        scale = lr_at(step, cfg.teacher_steps, 1.0, sched.warmup_steps, sched.min_lr_ratio)
        with Tape() as tape:
            out = model.loop_forward(batch.inputs)
            loss = ce_all_loops(out.logits, batch.targets)
        raw, clipped = _apply(opt, loss, tape, sched, scale)
        if log is not None:
            m = {"alpha": 0.0, "loss": loss.item(), "kd": 0.0, "ce": loss.item(), "align": 0.0,
                 "grad_norm": clipped, "grad_norm_raw": raw}
            log.write(_row(step, "teacher", m, cfg.teacher_lr * scale, t0))
    stream.close()
    return model


@dataclass
class RecipeResult:
    student: MeltLM
    teacher: LoopLM
    metrics: list = field(repr=False)
    teacher_accuracy: float = float("nan")
    student_accuracy: float = float("nan")


def train_student(cfg: RunConfig, teacher_model: LoopLM, seed: int, phases=("1", "2"),
                  ablate=(), log: MetricsLog | None = None, student: MeltLM | None = None) -> MeltLM:
    sched = cfg.schedule
    ablate = expand_ablation(ablate)
    if student is None:
        student = MeltLM.from_looplm(teacher_model, seed=seed, variant=cfg.variant)
    frozen = LoopLM(teacher_model.config, {
        k: Tensor(v.data.copy(), name=k) for k, v in teacher_model.params.items()
    })
    teacher = TeacherHandle(frozen)
    opt = make_optimizer(student, sched)
    run_p2 = "2" in phases and "no_align" not in ablate
    steps1 = sched.phase1_steps if "1" in phases else 0
    steps2 = sched.phase2_steps if run_p2 else 0
    total = steps1 + steps2
    stream = prefetch(batch_stream(cfg.task, sched.batch_size, seed + 1, **corpus_kwargs(cfg)))
    g = 0
    try:
        for step in range(steps1):
            batch = next(stream)
            t0 = time.perf_counter()
            scale = lr_at(g, total, 1.0, sched.warmup_steps, sched.min_lr_ratio)
            m = phase1_step(batch, student, teacher, sched, step, opt, ablate, scale)
            if log is not None:
                log.write(_row(step, "phase1", m, sched.lr * scale, t0))
            g += 1
        for step in range(steps2):
            batch = next(stream)
            t0 = time.perf_counter()
            scale = lr_at(g, total, 1.0, sched.warmup_steps, sched.min_lr_ratio)
            m = phase2_step(batch, student, teacher, sched, opt, scale)
            if log is not None:
                log.write(_row(step, "phase2", m, sched.lr * scale, t0))
            g += 1
    finally:
        stream.close()
    return student


def run_recipe(cfg: RunConfig, seed: int, ablate=(), log: MetricsLog | None = None,
               teacher: LoopLM | None = None) -> RecipeResult:
    """Teacher (unless given) -> Phase 1 -> Phase 2, then held-out accuracies."""
    log = log if log is not None else MetricsLog()
    if teacher is None:
        teacher = train_teacher(cfg, seed, log)
    student = train_student(cfg, teacher, seed, ("1", "2"), ablate, log)
    held = heldout_batch(cfg, seed)
    return RecipeResult(student, teacher, log.rows, token_accuracy(teacher, held),
                        token_accuracy(student, held))
