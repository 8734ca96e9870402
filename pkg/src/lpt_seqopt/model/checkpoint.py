"""Checkpoint container.

Layout (all integers little-endian)::

    bytes 0..7    magic  b"LPTCKPT\\x00"
    bytes 8..15   uint64 header length H
    bytes 16..    H bytes of UTF-8 JSON header
    then          raw array payload

The header holds ``format_version``, ``dtype`` (``"<f4"`` by default,
``"<f8"`` for bit-exact resume), the model config and vocabulary, the RNG
seed, iteration counters, a free-form ``config`` echo, and an ``arrays``
table of ``{name, shape, offset, nbytes}`` entries with offsets relative to
the start of the payload. Parameter arrays are named ``param/<name>``;
anything else (chain-bank states, ages) is stored under ``extra/<name>``.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from pathlib import Path

import numpy as np

from ..seqcore import Vocabulary
from .lpt import LPT, ModelConfig

MAGIC = b"LPTCKPT\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: LPT, *, seed=0, counters=None, extras=None,
                    config=None, dtype="<f4"):
    if dtype not in ("<f4", "<f8"):
        raise CheckpointError("dtype must be '<f4' or '<f8'")
    arrays = [("param/" + k, v) for k, v in sorted(model.params.items())]
    arrays += [("extra/" + k, np.asarray(v)) for k, v in sorted((extras or {}).items())]
    table, chunks, offset = [], [], 0
    for name, arr in arrays:
        raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        table.append({"name": name, "shape": list(np.shape(arr)), "offset": offset,
                      "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "dtype": dtype,
        "model": dataclasses.asdict(model.cfg),
        "vocab": model.vocab.to_dict(),
        "seed": int(seed),
        "label_center": model.label_center.tolist(),
        "label_scale": model.label_scale.tolist(),
        "counters": counters or {},
        "config": config,
        "arrays": table,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns (model, header, extras)."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
    payload = memoryview(data)[16 + hlen:]
    dtype = np.dtype(header["dtype"])
    params, extras = {}, {}
    for entry in header["arrays"]:
        buf = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(buf, dtype=dtype).astype(np.float64).reshape(entry["shape"])
        kind, name = entry["name"].split("/", 1)
        (params if kind == "param" else extras)[name] = arr
    model = LPT(Vocabulary.from_dict(header["vocab"]), ModelConfig(**header["model"]),
                params=params)
    if "label_center" in header:
        model.label_center = np.asarray(header["label_center"], dtype=np.float64)
        model.label_scale = np.asarray(header["label_scale"], dtype=np.float64)
    return model, header, extras
