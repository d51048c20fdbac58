"""Model and training configuration, plus the flat ``key=value`` file format.

Config files hold one ``key = value`` pair per line; ``#`` starts a comment.
Keys are the field names of :class:`ModelConfig` and :class:`TrainSchedule`
(plus a few run-level keys such as ``task``). Unknown keys or unparsable
values raise :class:`ConfigError` naming the key.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    hidden_dim: int = 64
    n_heads: int = 4
    loops: int = 3
    vocab_size: int = 32
    max_seq_len: int = 64
    ffn_mult: int = 4
    norm_eps: float = 1e-6
    rope_base: float = 10000.0

    def __post_init__(self):
        for name in ("n_layers", "hidden_dim", "n_heads", "loops", "vocab_size", "max_seq_len", "ffn_mult"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive int, got {v!r}")
        if self.hidden_dim % self.n_heads:
            raise ConfigError(
                f"hidden_dim={self.hidden_dim} is not divisible by n_heads={self.n_heads}"
            )
        if self.head_dim % 2:
            raise ConfigError(f"head_dim={self.head_dim} must be even for rotary embeddings")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.n_heads

    def with_loops(self, loops: int) -> "ModelConfig":
        return dataclasses.replace(self, loops=loops)


GATE_VARIANTS = ("gated", "mean", "ema", "last", "single_gated")
TASKS = ("copy", "modular_add")
ABLATIONS = ("no_align", "no_interp", "no_kd", "no_chunk")


@dataclass(frozen=True)
class TrainSchedule:
    # names follow the training hyperparameter table, scaled to desk size
    chunk_size: int = 2
    interp_steps: int = 200
    phase1_steps: int = 400
    phase2_steps: int = 200
    beta: float = 0.1
    lr: float = 1e-3
    gate_lr: float = 1e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    warmup_steps: int = 20
    min_lr_ratio: float = 0.1
    batch_size: int = 32
    ce_weight: float = 0.5
    align_token_mean: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.chunk_size < 1:
            raise ConfigError("chunk_size must be >= 1")
        if self.interp_steps < 1:
            raise ConfigError("interp_steps must be >= 1")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive")


@dataclass(frozen=True)
class RunConfig:
    """Everything a ``melt train`` invocation reads from its config file."""

    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    task: str = "copy"
    seq_items: int = 8
    n_problems: int = 4
    modulus: int = 7
    teacher_steps: int = 600
    teacher_lr: float = 3e-3
    eval_size: int = 256
    variant: str = "gated"

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.variant not in GATE_VARIANTS:
            raise ConfigError(f"variant must be one of {GATE_VARIANTS}, got {self.variant!r}")

    def to_items(self) -> dict:
        out = {}
        for f in fields(ModelConfig):
            out[f.name] = getattr(self.model, f.name)
        for f in fields(TrainSchedule):
            out[f.name] = getattr(self.schedule, f.name)
        for f in fields(RunConfig):
            if f.name not in ("model", "schedule"):
                out[f.name] = getattr(self, f.name)
        return out


def _coerce(key, raw, typ):
    raw = raw.strip()
    try:
        if typ is bool or typ == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int or typ == "int":
            return int(raw)
        if typ is float or typ == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for key {key!r}: {raw!r}") from None


def _field_types(cls):
    return {f.name: f.type for f in fields(cls)}


def parse_config_text(text: str) -> RunConfig:
    model_t = _field_types(ModelConfig)
    sched_t = _field_types(TrainSchedule)
    run_t = {k: v for k, v in _field_types(RunConfig).items() if k not in ("model", "schedule")}
    m, s, r = {}, {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key in model_t:
            m[key] = _coerce(key, raw, model_t[key])
        elif key in sched_t:
            s[key] = _coerce(key, raw, sched_t[key])
        elif key in run_t:
            r[key] = _coerce(key, raw, run_t[key])
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        return RunConfig(model=ModelConfig(**m), schedule=TrainSchedule(**s), **r)
    except ConfigError:
        raise
    except TypeError as e:  # pragma: no cover - guarded by the key tables above
        raise ConfigError(str(e)) from None


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for k, v in cfg.to_items().items():
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
