"""``melt`` command line: train, generate, profile, verify, plot.

Exit codes: 0 success, 1 verification failure, 2 user or config error,
3 numeric abort. Artifacts go under ``--out`` or, failing that,
``$MELT_OUTPUT_ROOT/<command>`` (``./runs`` by default); each
artifact-producing command writes one ``manifest.json`` there.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import json
import os
import subprocess
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint, memory
from .config import ABLATIONS, GATE_VARIANTS, ConfigError, RunConfig, dump_config, load_config
from .looplm import ShareStrategy
from .melt import MeltLM
from .train import (
    MetricsLog,
    NumericAbort,
    heldout_batch,
    token_accuracy,
    train_student,
    train_teacher,
)

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _git_describe() -> str:
    try:
        r = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                           capture_output=True, text=True, timeout=5,
                           cwd=Path(__file__).resolve().parent)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return r.stdout.strip() or "unknown"


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    output_dir: str
    seed: int | None = None
    config: dict = field(default_factory=dict)
    git_describe: str = field(default_factory=_git_describe)
    started: str = field(default_factory=_now)
    finished: str | None = None

    def write(self):
        self.finished = _now()
        path = Path(self.output_dir) / "manifest.json"
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")
        return path


def output_dir(args, command: str) -> Path:
    if getattr(args, "out", None):
        out = Path(args.out)
    else:
        out = Path(os.environ.get("MELT_OUTPUT_ROOT", "runs")) / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.variant:
        cfg = dataclasses.replace(cfg, variant=args.variant)
    return cfg


def _load_checkpoint(path):
    try:
        return checkpoint.load(path)
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {path}") from None
    except checkpoint.CheckpointError as e:
        raise UsageError(str(e)) from None


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    try:
        cfg = _load_run_config(args)
    except FileNotFoundError:
        raise UsageError(f"config not found: {args.config}") from None
    out = output_dir(args, "train")
    seed = cfg.schedule.seed if args.seed is None else args.seed
    man = RunManifest("train", str(out), seed, cfg.to_items())
    (out / "config.txt").write_text(dump_config(cfg))
    log = MetricsLog(out / "metrics.jsonl")
    summary = {"phase": args.phase, "ablate": sorted(args.ablate or [])}
    try:
        if args.phase == "teacher" or (args.phase == "all" and not args.teacher):
            teacher = train_teacher(cfg, seed, log)
            checkpoint.save(teacher, out / "teacher.ckpt")
        elif args.teacher:
            teacher = _load_checkpoint(args.teacher)
            if teacher.kind != "looplm":
                raise UsageError(f"{args.teacher} is a {teacher.kind} checkpoint, not a LoopLM teacher")
        else:
            raise UsageError(f"--phase {args.phase} needs a teacher checkpoint (--teacher PATH)")
        held = heldout_batch(cfg, seed)
        summary["teacher_accuracy"] = token_accuracy(teacher, held)
        if args.phase != "teacher":
            phases = ("1", "2") if args.phase == "all" else (args.phase,)
            init = None
            if args.init:
                init = _load_checkpoint(args.init)
                if not isinstance(init, MeltLM):
                    raise UsageError(f"--init {args.init} is not a MELT checkpoint")
            student = train_student(cfg, teacher, seed, phases, args.ablate or (), log, init)
            checkpoint.save(student, out / "student.ckpt")
            summary["student_accuracy"] = token_accuracy(student, held)
    finally:
        log.close()
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    man.write()
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# generate


def _parse_prompt(text: str) -> list[int]:
    try:
        ids = [int(t) for t in text.replace(",", " ").split()]
    except ValueError:
        raise UsageError(f"prompt must be integer token ids, got {text!r}") from None
    if not ids:
        raise UsageError("prompt is empty")
    return ids


def predicted_kv_elements(model, strategy: ShareStrategy, n_prompt: int, n_total: int) -> int:
    cfg = model.config
    per_row = cfg.n_layers * 2 * cfg.hidden_dim
    if isinstance(model, MeltLM):
        return per_row * n_total
    if strategy.mode.value == "none":
        return per_row * n_total * cfg.loops
    exact = n_prompt if strategy.keep_prompt_cache else 0
    return per_row * (exact * cfg.loops + (n_total - exact))


def cmd_generate(args) -> int:
    model = _load_checkpoint(args.checkpoint)
    prompt = _parse_prompt(args.prompt)
    for t in prompt:
        if not 0 <= t < model.config.vocab_size:
            raise UsageError(f"token {t} is outside the vocabulary of {model.config.vocab_size}")
    strategy = ShareStrategy.parse(args.strategy, args.keep_prompt_cache)
    try:
        res = model.generate(prompt, args.max_new, strategy, args.seed, args.temperature, args.top_p)
    except ValueError as e:
        raise UsageError(str(e)) from None
    predicted = predicted_kv_elements(model, strategy, len(prompt), len(prompt) + len(res.tokens))
    print(" ".join(str(t) for t in res.tokens))
    print(f"kv_elements measured={res.kv_elements} analytic={predicted} "
          f"latent={res.latent_elements} match={'yes' if res.kv_elements == predicted else 'no'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# profile


def _custom_spec(args):
    needed = ("layers", "kv_heads", "head_dim", "params")
    missing = [n for n in needed if getattr(args, n) is None]
    if missing:
        raise UsageError("custom profile needs " + ", ".join("--" + m.replace("_", "-") for m in missing))
    try:
        spec = memory.MemorySpec(args.layers, args.kv_heads, args.head_dim, args.bytes, args.loops,
                                 args.cache_mode, args.hidden_dim)
        return memory.generation_report(spec, args.params, args.length, args.name, args.include_latent)
    except ValueError as e:
        raise UsageError(str(e)) from None


def cmd_profile(args) -> int:
    if args.layers is not None:
        reports = [_custom_spec(args)]
    else:
        reports = [memory.preset_report(p, args.length, args.include_latent)
                   for p in (args.preset or list(memory.PRESETS))]
    if args.format in ("table", "both"):
        sys.stdout.write(memory.render_table(reports))
    text = memory.render_csv(reports)
    if args.format in ("csv", "both"):
        if args.format == "both":
            sys.stdout.write("\n")
        sys.stdout.write(text)
    if args.csv:
        Path(args.csv).write_text(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify


def cmd_verify(args) -> int:
    from .verify import run_suite

    out = output_dir(args, "verify")
    man = RunManifest("verify", str(out), 0, {"suite": args.suite, "inject_fault": args.inject_fault})
    results = run_suite(args.suite, inject_fault=args.inject_fault)
    lines = [r.to_json() for r in results]
    for line in lines:
        print(line)
    (out / "report.jsonl").write_text("\n".join(lines) + "\n")
    man.write()
    failed = [r for r in results if not r.ok]
    for r in failed:
        print(f"FAILED {r.name}: metric={r.metric:.3e} tolerance={r.tolerance:.3e}", file=sys.stderr)
    return EXIT_VERIFY if failed else EXIT_OK


# ---------------------------------------------------------------------------
# plot


def _read_metrics(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    return rows


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    out = output_dir(args, "plot")
    man = RunManifest("plot", str(out), None, {"metrics": [str(m) for m in args.metrics]})
    plt.rcParams["svg.hashsalt"] = "melt"  # stable element ids across runs
    written = []
    if args.metrics:
        fig, ax = plt.subplots(figsize=(6, 4))
        for path in args.metrics:
            try:
                rows = _read_metrics(path)
            except FileNotFoundError:
                raise UsageError(f"metrics file not found: {path}") from None
            ax.plot(np.arange(len(rows)), [r["loss"] for r in rows], label=Path(path).parent.name or str(path))
        ax.set_yscale("log")
        ax.set_xlabel("optimizer step (all phases)")
        ax.set_ylabel("loss")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "loss.svg", metadata={"Date": None})
        plt.close(fig)
        written.append("loss.svg")

    loops = np.arange(1, args.max_loops + 1)
    name, spec, _ = memory.PRESETS["melt16"]
    fig, ax = plt.subplots(figsize=(6, 4))
    for mode, label in ((memory.CacheMode.PER_LOOP, "LoopLM"), (memory.CacheMode.SHARED, "MELT")):
        mb = [memory.kv_gb_published(
            args.length * memory.kv_bytes_per_token(dataclasses.replace(spec, loops=int(t), cache_mode=mode)))
            for t in loops]
        ax.plot(loops, mb, marker="o", label=label)
    ax.set_xlabel("loops T")
    ax.set_ylabel(f"KV cache at {args.length} tokens (GB)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "memory_vs_loops.svg", metadata={"Date": None})
    plt.close(fig)
    written.append("memory_vs_loops.svg")
    man.write()
    for w in written:
        print(out / w)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="melt", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a LoopLM teacher and/or a MELT student")
    t.add_argument("--config", help="key=value config file")
    t.add_argument("--phase", choices=("teacher", "1", "2", "all"), default="all")
    t.add_argument("--teacher", help="LoopLM checkpoint (required for --phase 1/2)")
    t.add_argument("--init", help="MELT checkpoint to continue from (e.g. phase 1 output)")
    t.add_argument("--variant", choices=GATE_VARIANTS)
    t.add_argument("--ablate", action="append", choices=ABLATIONS,
                   help="remove a training component (and every one removed before it)")
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.set_defaults(fn=cmd_train)

    g = sub.add_parser("generate", help="decode from a checkpoint and report cache size")
    g.add_argument("checkpoint")
    g.add_argument("--prompt", required=True, help="token ids, comma or space separated")
    g.add_argument("--strategy", choices=("none", "first_loop", "last_loop"), default="none")
    g.add_argument("--keep-prompt-cache", action="store_true")
    g.add_argument("--max-new", type=int, default=16)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--temperature", type=float, default=0.0)
    g.add_argument("--top-p", type=float, default=1.0)
    g.set_defaults(fn=cmd_generate)

    pr = sub.add_parser("profile", help="KV-cache and weight memory table")
    pr.add_argument("--preset", action="append", choices=sorted(memory.PRESETS))
    pr.add_argument("--length", type=int, default=32768)
    pr.add_argument("--include-latent", action="store_true")
    pr.add_argument("--format", choices=("table", "csv", "both"), default="both")
    pr.add_argument("--csv", help="also write the CSV rows to this file")
    pr.add_argument("--name", default="custom")
    pr.add_argument("--layers", type=int)
    pr.add_argument("--kv-heads", type=int)
    pr.add_argument("--head-dim", type=int)
    pr.add_argument("--hidden-dim", type=int)
    pr.add_argument("--loops", type=int, default=1)
    pr.add_argument("--cache-mode", choices=[m.value for m in memory.CacheMode], default="standard")
    pr.add_argument("--bytes", type=int, default=2)
    pr.add_argument("--params", type=float)
    pr.set_defaults(fn=cmd_profile)

    v = sub.add_parser("verify", help="run verification suites")
    v.add_argument("--suite", choices=("jacobian", "superhighway", "equivalence", "all"), default="all")
    v.add_argument("--inject-fault", action="store_true", help="miswire the gate (negative control)")
    v.add_argument("--out")
    v.set_defaults(fn=cmd_verify)

    pl = sub.add_parser("plot", help="SVG loss curves and memory-vs-loops")
    pl.add_argument("metrics", nargs="*", help="metrics.jsonl files")
    pl.add_argument("--length", type=int, default=32768)
    pl.add_argument("--max-loops", type=int, default=8)
    pl.add_argument("--out")
    pl.set_defaults(fn=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as e:
        print(f"melt {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericAbort as e:
        print(f"melt {args.command}: numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
