"""Checkpoint directory format.

``manifest.txt``  UTF-8; a ``step=<t>`` line, then one line per array:
                  ``name<TAB>shape<TAB>dtype<TAB>offset<TAB>crc32`` where shape
                  is ``3x4`` (empty for scalars) and dtype is ``<f4``/``<f8``.
``payload.bin``   raw little-endian array bytes, concatenated.
``model_config.txt``  the ModelConfig as ``key=value`` lines.
"""
from __future__ import annotations

import zlib
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

MANIFEST = "manifest.txt"
PAYLOAD = "payload.bin"
MODEL_CONFIG = "model_config.txt"


class CheckpointError(RuntimeError):
    pass


def write_arrays(path, arrays: "OrderedDict[str, np.ndarray]", step: int,
                 extra_files: Dict[str, str] | None = None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = [f"step={int(step)}\n"]
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        if "\t" in name or "\n" in name:
            raise ValueError(f"bad array name {name!r}")
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        shape = "x".join(str(s) for s in arr.shape)
        lines.append(f"{name}\t{shape}\t{le.dtype.str}\t{offset}\t{zlib.crc32(raw):08x}\n")
        chunks.append(raw)
        offset += len(raw)
    # payload first so a crash never leaves a manifest pointing at missing bytes
    (path / PAYLOAD).write_bytes(b"".join(chunks))
    (path / MANIFEST).write_text("".join(lines), encoding="utf-8")
    for fname, text in (extra_files or {}).items():
        (path / fname).write_text(text, encoding="utf-8")


def read_arrays(path) -> Tuple["OrderedDict[str, np.ndarray]", int]:
    path = Path(path)
    try:
        lines = (path / MANIFEST).read_text(encoding="utf-8").splitlines()
        payload = (path / PAYLOAD).read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"incomplete checkpoint: {exc.filename}") from None
    if not lines or not lines[0].startswith("step="):
        raise CheckpointError(f"{path / MANIFEST}: missing step line")
    step = int(lines[0].partition("=")[2])
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    end = 0
    for line in lines[1:]:
        try:
            name, shape, dtype, offset, crc = line.split("\t")
        except ValueError:
            raise CheckpointError(f"malformed manifest line {line!r}") from None
        shape_t = tuple(int(s) for s in shape.split("x")) if shape else ()
        dt = np.dtype(dtype)
        nbytes = int(np.prod(shape_t, dtype=np.int64)) * dt.itemsize
        start = int(offset)
        raw = payload[start:start + nbytes]
        if len(raw) != nbytes:
            raise CheckpointError(f"{name}: payload truncated")
        if f"{zlib.crc32(raw):08x}" != crc:
            raise CheckpointError(f"{name}: checksum mismatch")
        arrays[name] = np.frombuffer(raw, dtype=dt).reshape(shape_t).astype(dt.newbyteorder("="))
        end = max(end, start + nbytes)
    if end != len(payload):
        raise CheckpointError(f"payload has {len(payload) - end} unexpected trailing bytes")
    return arrays, step
