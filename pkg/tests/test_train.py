import dataclasses
import math

import numpy as np
import pytest

from melt import tensor as tn
from melt.config import ModelConfig, RunConfig, TrainSchedule
from melt.data import make_corpus
from melt.gradcheck import full_loss_check
from melt.looplm import LoopLM
from melt.melt import MeltLM
from melt.tensor import Tape, Tensor
from melt.train import (
    REMOVAL_ORDER,
    AdamW,
    MetricsLog,
    NumericAbort,
    TeacherHandle,
    alpha_schedule,
    attention_align_loss,
    ce_all_loops,
    clip_grad_norm,
    expand_ablation,
    kd_all_loops_loss,
    kl_all_loops,
    lr_at,
    make_optimizer,
    phase1_step,
    phase2_loss,
    train_student,
    train_teacher,
)


def test_ablations_are_progressive():
    assert expand_ablation([]) == frozenset()
    assert expand_ablation(["no_align"]) == {"no_align"}
    assert expand_ablation(["no_kd"]) == {"no_align", "no_interp", "no_kd"}
    assert expand_ablation(["no_chunk"]) == set(REMOVAL_ORDER)
    with pytest.raises(ValueError):
        expand_ablation(["no_gate"])


def test_alpha_schedule():
    assert [alpha_schedule(s, 4) for s in (0, 1, 2, 4, 9)] == [0.0, 0.25, 0.5, 1.0, 1.0]
    with pytest.raises(ValueError):
        alpha_schedule(0, 0)


def test_lr_schedule_frozen_values():
    # warmup 2, total 10, min ratio 0.1
    got = [round(lr_at(s, 10, 1.0, 2, 0.1), 12) for s in (0, 1, 2, 6, 10, 50)]
    assert got == [0.5, 1.0, 1.0, 0.55, 0.1, 0.1]


def _np_logsoftmax(x):
    z = x - x.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


def test_kd_loss_matches_numpy():
    rng = np.random.default_rng(0)
    s = [rng.standard_normal((2, 3, 5)) for _ in range(3)]
    t = [rng.standard_normal((2, 3, 5)) for _ in range(3)]
    targets = np.array([[1, -1, 4], [-1, 0, 2]])
    mask = targets >= 0
    kl = np.mean([
        (np.exp(_np_logsoftmax(b)) * (_np_logsoftmax(b) - _np_logsoftmax(a))).sum(-1)[mask].mean()
        for a, b in zip(s, t)
    ])
    ce = np.mean([-np.take_along_axis(_np_logsoftmax(a), np.where(mask, targets, 0)[..., None], -1)[..., 0][mask].mean()
                  for a in s])
    parts = kd_all_loops_loss([Tensor(a) for a in s], t, targets, 0.5)
    assert parts.kd == pytest.approx(kl, rel=1e-12)
    assert parts.ce == pytest.approx(ce, rel=1e-12)
    assert parts.total.item() == pytest.approx(kl + 0.5 * ce, rel=1e-12)


def test_kl_zero_for_identical_logits():
    x = np.random.default_rng(1).standard_normal((1, 4, 6))
    assert abs(kl_all_loops([Tensor(x)], [x], np.ones((1, 4), bool)).item()) < 1e-15


def test_kd_loop_count_mismatch():
    x = np.zeros((1, 2, 3))
    with pytest.raises(ValueError, match="loop"):
        kl_all_loops([Tensor(x)], [x, x], np.ones((1, 2), bool))


def test_align_loss_formula_and_stop_gradient():
    rng = np.random.default_rng(2)
    N, T = 2, 3
    om = [[Tensor(rng.standard_normal((2, 4, 5)), requires_grad=True) for _ in range(T)] for _ in range(N)]
    ot = [[Tensor(rng.standard_normal((2, 4, 5)), requires_grad=True) for _ in range(T)] for _ in range(N)]
    expect = 0.1 / (N * T) * sum(((om[l][t].data - ot[l][t].data) ** 2).sum(-1).mean()
                                 for l in range(N) for t in range(T))
    with Tape() as tape:
        loss = attention_align_loss(om, ot, 0.1)
    assert loss.item() == pytest.approx(expect, rel=1e-12)
    tn.backward(loss, tape)
    assert om[0][0].grad is not None and ot[0][0].grad is None
    summed = attention_align_loss(om, ot, 0.1, token_mean=False).item()
    assert summed == pytest.approx(expect * 8, rel=1e-12)


def test_ce_ignores_masked_targets():
    x = np.random.default_rng(3).standard_normal((1, 3, 4))
    a = ce_all_loops([Tensor(x)], np.array([[1, -1, 2]])).item()
    x2 = x.copy()
    x2[0, 1] += 100.0
    assert ce_all_loops([Tensor(x2)], np.array([[1, -1, 2]])).item() == pytest.approx(a, rel=1e-14)


def test_adamw_matches_hand_computation():
    p = Tensor(np.array([[1.0, -2.0]]), requires_grad=True)
    b = Tensor(np.array([0.5]), requires_grad=True)
    opt = AdamW([([p, b], 0.1)], betas=(0.9, 0.95), eps=1e-8, weight_decay=0.01)
    g = np.array([[0.3, -0.4]])
    p.grad, b.grad = g.copy(), np.array([2.0])
    opt.step(1.0)
    # first step: m_hat = g, v_hat = g^2 -> update = lr * sign(g) (eps aside)
    exp_p = np.array([[1.0, -2.0]]) * (1 - 0.1 * 0.01) - 0.1 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p.data, exp_p, rtol=1e-12)
    np.testing.assert_allclose(b.data, [0.5 - 0.1 * 2.0 / (2.0 + 1e-8)], rtol=1e-12)  # no decay on 1-D


def test_clip_grad_norm():
    a = Tensor(np.zeros(2), requires_grad=True)
    a.grad = np.array([3.0, 4.0])
    raw, clipped = clip_grad_norm([a], 1.0)
    assert (raw, clipped) == (5.0, 1.0)
    np.testing.assert_allclose(a.grad, [0.6, 0.8])
    a.grad = np.array([np.nan, 0.0])
    with pytest.raises(NumericAbort):
        clip_grad_norm([a], 1.0)


def test_full_loss_gradient(small_cfg):
    # interpolated, chunked MELT loss with KD, CE and the alignment term
    res = full_loss_check(small_cfg, trials=100, seed=0)
    assert res.max_rel_err < 1e-4, res


def _cfg(**kw):
    sched = TrainSchedule(**{"batch_size": 4, "phase1_steps": 2, "phase2_steps": 1,
                             "interp_steps": 4, "warmup_steps": 1, **kw})
    return RunConfig(schedule=sched, seq_items=3, teacher_steps=2, eval_size=8)


def test_phase1_ablation_semantics(monkeypatch, tiny_cfg):
    cfg = _cfg(chunk_size=2)
    teacher = LoopLM(tiny_cfg, seed=0)
    batch = make_corpus("copy", 2, 0, n_items=3)
    seen = []
    orig = MeltLM.chunk_forward

    def spy(self, tokens, chunk_size, alpha=1.0, **kw):
        seen.append((chunk_size, alpha))
        return orig(self, tokens, chunk_size, alpha, **kw)

    monkeypatch.setattr(MeltLM, "chunk_forward", spy)
    for abl, expect in [((), (2, 0.0)), (("no_interp",), (2, 1.0)), (("no_chunk",), (batch.inputs.shape[1], 1.0))]:
        student = MeltLM.from_looplm(teacher)
        m = phase1_step(batch, student, TeacherHandle(LoopLM(tiny_cfg, seed=0)), cfg.schedule, 0,
                        make_optimizer(student, cfg.schedule), abl)
        assert seen[-1] == expect
        if "no_chunk" in abl:
            assert m["kd"] == 0.0  # no_kd is implied
        elif abl:
            assert m["kd"] > 0.0
        else:
            assert abs(m["kd"]) < 1e-12  # at alpha 0 the student is the teacher


def test_gate_learning_rate_group(tiny_cfg):
    sched = TrainSchedule(lr=1e-3, gate_lr=1e-2)
    opt = make_optimizer(MeltLM(tiny_cfg), sched)
    assert [lr for _, lr in opt.groups] == [1e-3, 1e-2]
    assert len(opt.groups[1][0]) == 3 * tiny_cfg.n_layers


def test_phase2_teacher_stays_frozen(tiny_cfg):
    cfg = _cfg()
    teacher = TeacherHandle(LoopLM(tiny_cfg, seed=0))
    before = teacher.checksum()
    student = MeltLM.from_looplm(teacher.model)
    batch = make_corpus("copy", 2, 0, n_items=3)
    tape, parts = phase2_loss(batch, student, teacher, cfg.schedule)
    tn.backward(parts.total, tape)
    assert all(p.grad is None for p in teacher.model.parameters())
    assert teacher.checksum() == before
    assert parts.align > 0


def test_metrics_rows_deterministic(tmp_path):
    cfg = _cfg()
    rows = []
    for i in range(2):
        log = MetricsLog(tmp_path / f"m{i}.jsonl")
        train_teacher(cfg, 0, log)
        log.close()
        rows.append([{k: v for k, v in r.items() if k != "wall_ms"} for r in log.rows])
    assert rows[0] == rows[1]
    assert set(log.rows[0]) == {"step", "phase", "alpha", "loss", "kd", "ce", "align", "grad_norm",
                                "grad_norm_raw", "lr", "wall_ms"}
    assert all(math.isfinite(r["loss"]) for r in log.rows)


def test_nan_loss_aborts(tiny_cfg):
    cfg = dataclasses.replace(_cfg(), teacher_lr=float("nan"))
    # a NaN learning rate poisons the weights after one step, so the second loss is NaN
    with pytest.raises(NumericAbort):
        train_teacher(cfg, 0)


def test_kl_uniform_and_two_class_hand_case():
    mask = np.ones((1, 1), bool)
    flat = np.zeros((1, 1, 7))
    assert kl_all_loops([Tensor(flat)], [flat], mask).item() == 0.0
    p, q = 0.8, 0.3  # teacher, student probabilities of class 0
    hand = p * np.log(p / q) + (1 - p) * np.log((1 - p) / (1 - q))
    logit = lambda x: np.array([[[np.log(x), np.log(1 - x)]]])  # noqa: E731
    assert kl_all_loops([Tensor(logit(q))], [logit(p)], mask).item() == pytest.approx(hand, rel=1e-12)


def test_align_hand_case_beta_zero_and_linearity():
    one = [[Tensor(np.ones((1, 1, 4)))]]
    zero = [[Tensor(np.zeros((1, 1, 4)))]]
    assert attention_align_loss(one, zero, 0.1).item() == pytest.approx(0.4, rel=1e-15)
    assert attention_align_loss(one, zero, 0.0).item() == 0.0
    rng = np.random.default_rng(5)
    a = [[Tensor(rng.standard_normal((2, 3, 4))) for _ in range(2)] for _ in range(2)]
    b = [[Tensor(rng.standard_normal((2, 3, 4))) for _ in range(2)] for _ in range(2)]
    v1, v2 = (attention_align_loss(a, b, beta).item() for beta in (0.1, 0.3))
    assert v2 == pytest.approx(3 * v1, rel=1e-13)
    b[1][0].data = b[1][0].data + 1e-3  # teacher perturbation moves the value
    assert attention_align_loss(a, b, 0.1).item() != v1


def test_phase2_with_beta_zero_is_phase1_at_alpha_one(tiny_cfg):
    teacher = LoopLM(tiny_cfg, seed=0)
    student = MeltLM.from_looplm(teacher, seed=0)
    th = TeacherHandle(teacher)
    batch = make_corpus("copy", 3, 0, n_items=3)
    sched = TrainSchedule(beta=0.0, chunk_size=2)
    _, parts = phase2_loss(batch, student, th, sched)
    out = student.chunk_forward(batch.inputs, 2, 1.0)
    ref = kd_all_loops_loss(out.logits, th.outputs(batch.inputs)[0], batch.targets, sched.ce_weight)
    assert parts.total.item() == ref.total.item()
    assert parts.align == 0.0


@pytest.mark.slow
def test_training_curves_on_copy():
    # phase-1 loss falls over 200 steps; the align term falls over the first 50 phase-2 steps
    sched = TrainSchedule(batch_size=16, phase1_steps=200, interp_steps=100, phase2_steps=50,
                          warmup_steps=10, chunk_size=2)
    cfg = RunConfig(model=ModelConfig(hidden_dim=32, n_heads=2), schedule=sched,
                    seq_items=4, teacher_steps=150, eval_size=16)
    p1_drop, align_drop = [], []
    for seed in range(3):
        teacher = train_teacher(cfg, seed)
        log = MetricsLog()
        train_student(cfg, teacher, seed, ("1", "2"), (), log)
        p1 = [r["loss"] for r in log.rows if r["phase"] == "phase1"]
        al = [r["align"] for r in log.rows if r["phase"] == "phase2"]
        p1_drop.append(np.mean(p1[:10]) - np.mean(p1[-10:]))
        align_drop.append(np.mean(al[:5]) - np.mean(al[-5:]))
    assert np.median(p1_drop) > 0, p1_drop
    assert np.median(align_drop) > 0, align_drop
