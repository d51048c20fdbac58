"""Binary checkpoint files. The byte layout is described in docs/checkpoint_format.md."""

from __future__ import annotations

import dataclasses
import json
import struct

import numpy as np

from .config import ModelConfig
from .looplm import LoopLM
from .melt import MeltLM
from .tensor import Tensor

MAGIC = b"MELTCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sII")  # magic, version, header length


class CheckpointError(ValueError):
    pass


def save(model: LoopLM, path) -> None:
    names = list(model.params)
    directory, offset = [], 0
    for name in names:
        arr = model.params[name].data
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    header = {
        "kind": model.kind,
        "variant": getattr(model, "variant", None),
        "config": dataclasses.asdict(model.config),
        "params": directory,
        "n_values": offset,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    pad = (-(_PREFIX.size + len(blob))) % 8
    blob += b" " * pad
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        for name in names:
            fh.write(np.ascontiguousarray(model.params[name].data, dtype="<f8").tobytes())


def load(path) -> LoopLM:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: file too short for a checkpoint header")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[_PREFIX.size:_PREFIX.size + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from None
    start = _PREFIX.size + hlen
    if start > len(raw) or (len(raw) - start) % 8:
        raise CheckpointError(f"{path}: truncated data section")
    data = np.frombuffer(raw, dtype="<f8", offset=start)
    if data.size != header["n_values"]:
        raise CheckpointError(f"{path}: expected {header['n_values']} values, found {data.size}")
    params = {}
    for entry in header["params"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        arr = data[entry["offset"]:entry["offset"] + n].reshape(entry["shape"]).astype(np.float64)
        params[entry["name"]] = Tensor(arr, requires_grad=True, name=entry["name"])
    cfg = ModelConfig(**header["config"])
    if header["kind"] == "melt":
        return MeltLM(cfg, params, variant=header["variant"] or "gated")
    if header["kind"] == "looplm":
        return LoopLM(cfg, params)
    raise CheckpointError(f"{path}: unknown model kind {header['kind']!r}")
