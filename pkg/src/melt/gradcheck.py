"""Central finite-difference checks of reverse-mode gradients.

Each trial draws a random unit direction v over all inputs and compares the
analytic directional derivative ``<grad, v>`` with
``(f(x + eps v) - f(x - eps v)) / (2 eps)``. Non-scalar outputs are reduced
with a fixed random weighting so every output element contributes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import Tape, Tensor


@dataclass
class GradCheck:
    trials: int
    max_rel_err: float
    worst_trial: int


def _rel(a: float, b: float) -> float:
    den = max(abs(a), abs(b))
    return 0.0 if den == 0.0 else abs(a - b) / den


def check_op(fn, inputs, trials: int = 100, eps: float = 1e-5, seed: int = 0) -> GradCheck:
    """``fn(*tensors) -> Tensor``; ``inputs`` are float arrays (the differentiated arguments)."""
    rng = np.random.default_rng(seed)
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    probe = fn(*[Tensor(x) for x in inputs])
    weight = rng.standard_normal(probe.shape)

    def value(arrs):
        with tn.no_grad():
            return float((fn(*[Tensor(a) for a in arrs]).data * weight).sum())

    leaves = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    with Tape() as tape:
        loss = tn.sum(tn.mul(fn(*leaves), weight))
    tn.backward(loss, tape)
    grads = [np.zeros_like(x) if t.grad is None else t.grad for t, x in zip(leaves, inputs)]
    return _trials(value, inputs, grads, trials, eps, rng)


def check_loss(loss_fn, params: dict, trials: int = 100, eps: float = 1e-5, seed: int = 0) -> GradCheck:
    """``loss_fn()`` builds a scalar from the ``Tensor`` values of ``params`` (mutated in place)."""
    rng = np.random.default_rng(seed)
    names = list(params)
    base = [params[n].data.copy() for n in names]
    for n in names:
        params[n].grad = None
    with Tape() as tape:
        loss = loss_fn()
    tn.backward(loss, tape)
    grads = [np.zeros_like(b) if params[n].grad is None else params[n].grad.copy()
             for n, b in zip(names, base)]

    def value(arrs):
        for n, a in zip(names, arrs):
            params[n].data = a
        try:
            with tn.no_grad():
                return loss_fn().item()
        finally:
            for n, b in zip(names, base):
                params[n].data = b

    return _trials(value, base, grads, trials, eps, rng)


def _trials(value, base, grads, trials, eps, rng) -> GradCheck:
    worst, where = 0.0, -1
    for i in range(trials):
        v = [rng.standard_normal(b.shape) for b in base]
        norm = np.sqrt(sum(float((d * d).sum()) for d in v))
        v = [d / norm for d in v]
        analytic = float(sum((g * d).sum() for g, d in zip(grads, v)))
        plus = value([b + eps * d for b, d in zip(base, v)])
        minus = value([b - eps * d for b, d in zip(base, v)])
        err = _rel(analytic, (plus - minus) / (2 * eps))
        if err > worst:
            worst, where = err, i
    return GradCheck(trials, worst, where)


def op_cases(seed: int = 0) -> dict:
    """One ``(fn, inputs)`` case per differentiable op, with broadcasting and masking variants."""
    rng = np.random.default_rng(seed)

    def r(*shape):
        return rng.standard_normal(shape)

    causal = np.tril(np.ones((4, 4), bool))
    return {
        "add": (lambda a, b: tn.add(a, b), [r(3, 4), r(4)]),
        "sub": (lambda a, b: tn.sub(a, b), [r(2, 3, 4), r(3, 1)]),
        "mul": (lambda a, b: tn.mul(a, b), [r(3, 4), r(3, 4)]),
        "mul_broadcast": (lambda a, b: tn.mul(a, b), [r(2, 3, 4), r(1, 4)]),
        "scale": (lambda a: tn.scale(a, -1.7), [r(5)]),
        "sigmoid": (tn.sigmoid, [r(4, 5) * 3]),
        "gelu": (tn.gelu, [r(4, 5) * 2]),
        "exp": (tn.exp, [r(3, 3)]),
        "matmul": (tn.matmul, [r(3, 4), r(4, 2)]),
        "matmul_batched": (tn.matmul, [r(2, 3, 4), r(4, 5)]),
        "matmul_4d": (tn.matmul, [r(2, 2, 3, 4), r(2, 2, 4, 3)]),
        "sum_axis": (lambda a: tn.sum(a, axis=1), [r(3, 4, 2)]),
        "mean_keepdims": (lambda a: tn.mean(a, axis=-1, keepdims=True), [r(3, 4)]),
        "reshape": (lambda a: tn.reshape(a, (6, 2)), [r(3, 4)]),
        "transpose": (lambda a: tn.transpose(a, (2, 0, 1)), [r(2, 3, 4)]),
        "index": (lambda a: tn.index(a, (slice(None), slice(1, 3))), [r(3, 4)]),
        "concat": (lambda a, b: tn.concat([a, b], axis=-2), [r(2, 3, 4), r(2, 1, 4)]),
        "embedding": (lambda t: tn.embedding(t, np.array([[0, 2, 2], [1, 0, 3]])), [r(4, 3)]),
        "softmax": (lambda a: tn.softmax_rows(a), [r(2, 3, 5)]),
        "softmax_masked": (lambda a: tn.softmax_rows(a, causal), [r(3, 4, 4)]),
        "log_softmax": (tn.log_softmax, [r(3, 6)]),
        "gather_last": (lambda a: tn.gather_last(a, np.array([[0, 3], [2, 1]])), [r(2, 2, 4)]),
        "rms_norm": (lambda a, w: tn.rms_norm(a, w), [r(3, 8), r(8)]),
        "rope": (lambda a: tn.rope(a, np.arange(2, 7)), [r(2, 5, 8)]),
    }


def full_loss_check(cfg, trials: int = 100, eps: float = 1e-5, seed: int = 0) -> GradCheck:
    """Gradient check of the complete student objective on a tiny model.

    Chunked (size 2), interpolated (alpha 0.4) MELT forward; KD over all loops
    plus CE plus attention alignment. Gate weights are pushed away from their
    near-constant init so the gate path carries real gradient.
    """
    from .data import make_corpus
    from .looplm import LoopLM
    from .melt import MeltLM
    from .train import TeacherHandle, attention_align_loss, kd_all_loops_loss

    teacher = LoopLM(cfg, seed=seed + 1)
    student = MeltLM.from_looplm(teacher, seed=seed + 1)
    rng = np.random.default_rng(seed)
    d = cfg.hidden_dim
    for l in range(cfg.n_layers):
        student.p(f"gate.{l}.u_z").data = rng.normal(0, 0.3, (d, d))
        student.p(f"gate.{l}.b_z").data = rng.normal(0, 1.0, d)
    batch = make_corpus("copy", 2, seed, n_items=3, vocab_size=cfg.vocab_size)
    frozen = LoopLM(cfg, {k: Tensor(v.data.copy()) for k, v in teacher.params.items()})
    t_logits, t_post = TeacherHandle(frozen).outputs(batch.inputs)

    def loss():
        out = student.chunk_forward(batch.inputs, 2, alpha=0.4)
        parts = kd_all_loops_loss(out.logits, t_logits, batch.targets, 0.5)
        return tn.add(parts.total, attention_align_loss(out.post_attn, t_post, 0.1))

    return check_loss(loss, student.params, trials=trials, eps=eps, seed=seed)
