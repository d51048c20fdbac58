import struct

import numpy as np
import pytest

from melt import checkpoint
from melt.looplm import LoopLM
from melt.melt import MeltLM


@pytest.mark.parametrize("kind", ["looplm", "melt"])
def test_round_trip(tmp_path, tiny_cfg, kind):
    m = LoopLM(tiny_cfg, seed=2) if kind == "looplm" else MeltLM(tiny_cfg, seed=2, variant="mean")
    path = tmp_path / "m.ckpt"
    checkpoint.save(m, path)
    back = checkpoint.load(path)
    assert type(back) is type(m) and back.config == m.config
    assert getattr(back, "variant", None) == getattr(m, "variant", None)
    for k, v in m.params.items():
        assert np.array_equal(v.data, back.params[k].data)


def test_layout(tmp_path, tiny_cfg):
    path = tmp_path / "m.ckpt"
    checkpoint.save(LoopLM(tiny_cfg), path)
    raw = path.read_bytes()
    magic, version, hlen = struct.unpack_from("<8sII", raw)
    assert magic == b"MELTCKPT" and version == 1
    assert (16 + hlen) % 8 == 0
    assert (len(raw) - 16 - hlen) % 8 == 0


def test_rejects_bad_files(tmp_path, tiny_cfg):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + bytes(16))
    with pytest.raises(checkpoint.CheckpointError, match="magic"):
        checkpoint.load(bad)
    bad.write_bytes(b"abc")
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load(bad)
    good = tmp_path / "good.ckpt"
    checkpoint.save(LoopLM(tiny_cfg), good)
    trunc = tmp_path / "trunc.ckpt"
    trunc.write_bytes(good.read_bytes()[:-8])
    with pytest.raises(checkpoint.CheckpointError, match="expected"):
        checkpoint.load(trunc)
    trunc.write_bytes(good.read_bytes()[:-3])
    with pytest.raises(checkpoint.CheckpointError, match="truncated"):
        checkpoint.load(trunc)
