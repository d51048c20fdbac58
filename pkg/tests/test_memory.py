import csv
import io

import pytest
from hypothesis import given
from hypothesis import strategies as st

from melt import memory
from melt.memory import CacheMode, MemorySpec

# published per-token figures and the 32k column
TABLE = {"melt16": (196608, "6.29"), "ouro14": (786432, "25.17"), "qwen17": (114688, "3.67")}


@pytest.mark.parametrize("key", sorted(TABLE))
def test_presets_reproduce_published_rows(key):
    r = memory.preset_report(key)
    assert r.kv_bytes_per_token == TABLE[key][0]
    assert f"{r.kv_gb_published:.2f}" == TABLE[key][1]


def test_model_bytes():
    assert memory.model_bytes(0) == 0
    assert memory.model_bytes(1.636e9) / 1e9 == 3.272
    assert f"{memory.model_bytes(1.4345e9) / 1e9:.3f}" == "2.869"
    with pytest.raises(ValueError):
        memory.model_bytes(-1)


def test_ouro_over_melt_is_loop_count():
    assert memory.preset_report("ouro14").kv_bytes_per_token == 4 * memory.preset_report("melt16").kv_bytes_per_token


@given(st.integers(1, 64))
def test_shared_cache_independent_of_loops(T):
    spec = MemorySpec(24, 16, 128, 2, T, CacheMode.SHARED)
    assert memory.kv_bytes_per_token(spec) == 196608


@given(st.integers(1, 64), st.integers(1, 8))
def test_per_loop_cache_linear_in_loops(T, layers):
    one = memory.kv_bytes_per_token(MemorySpec(layers, 2, 8, 2, 1, CacheMode.PER_LOOP))
    assert memory.kv_bytes_per_token(MemorySpec(layers, 2, 8, 2, T, CacheMode.PER_LOOP)) == T * one


def test_zero_length():
    r = memory.preset_report("melt16", length=0)
    assert r.kv_bytes_at() == 0 and r.total_bytes_at() == r.model_bytes
    with pytest.raises(ValueError):
        memory.preset_report("melt16", length=-1)


def test_include_latent_adds_n_d_bytes():
    a = memory.preset_report("melt16").kv_bytes_per_token
    b = memory.preset_report("melt16", include_latent=True).kv_bytes_per_token
    assert b - a == 24 * 2048 * 2
    # per-loop caches store no latent
    assert memory.preset_report("ouro14", include_latent=True).kv_bytes_per_token == 786432


def test_units():
    r = memory.preset_report("melt16")
    assert r.kv_bytes_at() == 6442450944
    assert r.kv_gib == 6.0  # true binary GiB differs from the published column


def test_csv_columns():
    rows = list(csv.DictReader(io.StringIO(memory.render_csv([memory.preset_report(k) for k in memory.PRESETS]))))
    assert list(rows[0])[:5] == ["model", "mb_per_token", "model_gb", "kv32k_gib", "total"]
    assert [r["mb_per_token"] for r in rows] == ["0.196608", "0.786432", "0.114688"]


def test_table_has_four_value_columns():
    text = memory.render_table([memory.preset_report("qwen17")])
    assert "KV-cache (MB/token)" in text and "Total for L (GB)" in text
    assert "0.114688" in text


def test_spec_validation_and_unknown_preset():
    with pytest.raises(ValueError):
        MemorySpec(0, 1, 1)
    with pytest.raises(ValueError, match="unknown preset"):
        memory.preset_report("llama")
