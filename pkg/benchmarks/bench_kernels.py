"""Numba vs numpy timings for the hot kernels, plus where a training step spends its time.

    python benchmarks/bench_kernels.py            # kernels, then steps under both backends
    python benchmarks/bench_kernels.py --steps    # one backend only (picked by MELT_NUMBA)

Shapes match the acceptance config: batch 32, 17 positions, d=64, 4 heads, ffn 256.
"""

import argparse
import cProfile
import dataclasses
import os
import pstats
import subprocess
import sys
import timeit

import numpy as np

from melt import _accel

B, L, D, H, F = 32, 17, 64, 4, 256


def _best(fn, number):
    return min(timeit.repeat(fn, number=number, repeat=5)) / number


def kernel_table():
    if not _accel.HAVE_NUMBA:
        print("numba not installed; only the numpy path exists")
        return
    rng = np.random.default_rng(0)
    # kernels see the flattened shapes the tensor ops pass in
    scores = rng.standard_normal((B * H, L, L))
    allowed = np.tril(np.ones((L, L), dtype=bool))
    rows = rng.standard_normal((B * L, D))
    w = rng.standard_normal(D)
    hid = rng.standard_normal((B * L, F))
    q = rng.standard_normal((B * H, L, D // H))
    ang = np.arange(L)[:, None] * 10000.0 ** (-np.arange(D // H // 2) / (D // H // 2))
    cos, sin = np.cos(ang), np.sin(ang)
    y = _accel.softmax_fwd_np(scores, allowed)
    _, inv = _accel.rms_norm_fwd_np(rows, w, 1e-6)

    cases = {
        "softmax_fwd": lambda k: k(scores, allowed),
        "softmax_bwd": lambda k: k(y, scores),
        "rms_norm_fwd": lambda k: k(rows, w, 1e-6),
        "rms_norm_bwd": lambda k: k(rows, w, inv, rows),
        "gelu_fwd": lambda k: k(hid),
        "gelu_bwd": lambda k: k(hid, hid),
        "rope": lambda k: k(q, cos, sin, 1.0),
    }
    print(f"{'kernel':<14}{'numpy us':>10}{'numba us':>10}{'speedup':>9}")
    for name, call in cases.items():
        k_np = getattr(_accel, name + "_np")
        k_nb = getattr(_accel, name + "_nb")
        call(k_nb)  # compile outside the timer
        t_np = _best(lambda: call(k_np), 200)
        t_nb = _best(lambda: call(k_nb), 200)
        print(f"{name:<14}{t_np * 1e6:>10.1f}{t_nb * 1e6:>10.1f}{t_np / t_nb:>8.2f}x")


def _matmul_keys():
    from melt import tensor as tn

    code = tn.matmul.__code__
    lines = {code.co_firstlineno}
    lines |= {c.co_firstlineno for c in code.co_consts if hasattr(c, "co_firstlineno")}
    return tn.__file__, lines


def step_profile(steps):
    from melt.config import load_config
    from melt.train import MetricsLog, train_student, train_teacher

    cfg = load_config(os.path.join(os.path.dirname(__file__), "..", "configs", "copy.txt"))
    cfg = dataclasses.replace(
        cfg, teacher_steps=steps,
        schedule=dataclasses.replace(cfg.schedule, phase1_steps=steps, phase2_steps=steps))
    teacher = train_teacher(cfg, 0, MetricsLog())  # warm-up, also compiles kernels
    prof = cProfile.Profile()
    t0 = timeit.default_timer()
    prof.enable()
    train_student(cfg, teacher, 0, ("1", "2"), (), MetricsLog())
    prof.disable()
    wall = timeit.default_timer() - t0
    st = pstats.Stats(prof)
    fname, lines = _matmul_keys()
    total = sum(v[2] for v in st.stats.values())
    mm = sum(v[2] for (f, ln, _), v in st.stats.items() if f == fname and ln in lines)
    print(f"backend={_accel.backend()} student_steps={2 * steps} wall={wall:.2f}s "
          f"ms/step={wall / (2 * steps) * 1e3:.1f} matmul_share={mm / total:.0%}")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", action="store_true", help="profile training steps on the current backend")
    ap.add_argument("--n", type=int, default=20, help="steps per phase")
    args = ap.parse_args()
    if args.steps:
        step_profile(args.n)
        return
    kernel_table()
    print(flush=True)
    for flag in ("0", "1"):
        env = dict(os.environ, MELT_NUMBA=flag)
        subprocess.run([sys.executable, __file__, "--steps", "--n", str(args.n)], env=env, check=True)


if __name__ == "__main__":
    main()
