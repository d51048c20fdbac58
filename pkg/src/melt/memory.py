"""Closed-form KV-cache and weight memory accounting.

All arithmetic is in integer bytes; units appear only when rendering.

The published per-token figures are K+V only (no latent rows), so the
default report matches them and ``include_latent`` adds the latent line.
The published 32k-token KV column is ``MB_per_token * L / 1024``: decimal
megabytes divided by 1024, not a pure GB or GiB. :func:`kv_gb_published`
reproduces that convention and :func:`gib` gives the true binary figure.
"""

from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass


class CacheMode(str, enum.Enum):
    PER_LOOP = "per_loop"  # LoopLM: one K/V row per token per loop
    SHARED = "shared"  # MELT: one K/V row per token, any loop count
    STANDARD = "standard"  # non-looped transformer


@dataclass(frozen=True)
class MemorySpec:
    n_layers: int
    n_kv_heads: int
    head_dim: int
    bytes_per_elem: int = 2
    loops: int = 1
    cache_mode: CacheMode = CacheMode.STANDARD
    hidden_dim: int | None = None  # latent width; defaults to n_kv_heads * head_dim

    def __post_init__(self):
        object.__setattr__(self, "cache_mode", CacheMode(self.cache_mode))
        for name in ("n_layers", "n_kv_heads", "head_dim", "bytes_per_elem", "loops"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def loop_multiplier(self) -> int:
        return self.loops if self.cache_mode is CacheMode.PER_LOOP else 1

    @property
    def latent_dim(self) -> int:
        return self.hidden_dim if self.hidden_dim is not None else self.n_kv_heads * self.head_dim


def kv_elements_per_token(spec: MemorySpec) -> int:
    return spec.n_layers * 2 * spec.n_kv_heads * spec.head_dim * spec.loop_multiplier


def kv_bytes_per_token(spec: MemorySpec, include_latent: bool = False) -> int:
    b = kv_elements_per_token(spec) * spec.bytes_per_elem
    if include_latent and spec.cache_mode is CacheMode.SHARED:
        b += spec.n_layers * spec.latent_dim * spec.bytes_per_elem
    return b


def model_bytes(n_params) -> int:
    """Weights at 2 bytes per parameter."""
    n = int(round(n_params))
    if n < 0:
        raise ValueError("n_params must be >= 0")
    return 2 * n


@dataclass(frozen=True)
class MemoryReport:
    name: str
    kv_bytes_per_token: int
    model_bytes: int
    length: int

    def kv_bytes_at(self, length: int | None = None) -> int:
        return (self.length if length is None else length) * self.kv_bytes_per_token

    def total_bytes_at(self, length: int | None = None) -> int:
        return self.model_bytes + self.kv_bytes_at(length)

    # rendering
    @property
    def mb_per_token(self) -> float:
        return self.kv_bytes_per_token / 1e6

    @property
    def model_gb(self) -> float:
        return self.model_bytes / 1e9

    @property
    def kv_gb_published(self) -> float:
        return kv_gb_published(self.kv_bytes_at())

    @property
    def kv_gib(self) -> float:
        return gib(self.kv_bytes_at())

    @property
    def total_gb_published(self) -> float:
        return self.model_gb + self.kv_gb_published


def kv_gb_published(n_bytes: int) -> float:
    return n_bytes / 1e6 / 1024


def gib(n_bytes: int) -> float:
    return n_bytes / 2**30


def generation_report(spec: MemorySpec, n_params, length: int = 32768, name: str = "",
                      include_latent: bool = False) -> MemoryReport:
    if length < 0:
        raise ValueError("length must be >= 0")
    return MemoryReport(name, kv_bytes_per_token(spec, include_latent), model_bytes(n_params), length)


# Parameter counts are the published model-memory column halved.
PRESETS = {
    "melt16": ("MELT-1.6B", MemorySpec(24, 16, 128, 2, 4, CacheMode.SHARED), 1.636e9),
    "ouro14": ("Ouro-1.4B-Thinking", MemorySpec(24, 16, 128, 2, 4, CacheMode.PER_LOOP), 1.4345e9),
    "qwen17": ("Qwen3-1.7B", MemorySpec(28, 8, 128, 2, 1, CacheMode.STANDARD), 1.721e9),
}


def preset_report(key: str, length: int = 32768, include_latent: bool = False) -> MemoryReport:
    try:
        name, spec, n = PRESETS[key]
    except KeyError:
        raise ValueError(f"unknown preset {key!r}; choose from {sorted(PRESETS)}") from None
    return generation_report(spec, n, length, name, include_latent)


CSV_COLUMNS = ("model", "mb_per_token", "model_gb", "kv32k_gib", "total", "kv32k_bytes", "kv32k_true_gib")


def report_row(r: MemoryReport) -> dict:
    return {
        "model": r.name,
        "mb_per_token": f"{r.mb_per_token:.6f}",
        "model_gb": f"{r.model_gb:.3f}",
        "kv32k_gib": f"{r.kv_gb_published:.2f}",
        "total": f"{r.total_gb_published:.2f}",
        "kv32k_bytes": str(r.kv_bytes_at()),
        "kv32k_true_gib": f"{r.kv_gib:.2f}",
    }


def render_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow(report_row(r))
    return buf.getvalue()


def render_table(reports) -> str:
    head = ("Model", "KV-cache (MB/token)", "Model memory (GB)", "KV-cache for L (GB)", "Total for L (GB)")
    rows = [head]
    for r in reports:
        row = report_row(r)
        rows.append((r.name, row["mb_per_token"], row["model_gb"], row["kv32k_gib"], row["total"]))
    widths = [max(len(str(row[i])) for row in rows) for i in range(len(head))]
    lines = []
    for j, row in enumerate(rows):
        lines.append("  ".join(str(c).ljust(w) for c, w in zip(row, widths)).rstrip())
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def analytic_kv_elements(n_layers: int, hidden_dim: int, tokens: int, loops: int, mode) -> int:
    """K+V element count for a live desk-scale session (n_kv_heads * head_dim = hidden_dim)."""
    mode = CacheMode(mode)
    mult = loops if mode is CacheMode.PER_LOOP else 1
    return n_layers * 2 * hidden_dim * tokens * mult
