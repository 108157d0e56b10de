"""Checkpoint container and CSV writers.

Checkpoint layout: a UTF-8 text manifest followed by a little-endian
float32 payload::

    TRFEDDIS-CKPT 1
    meta {"model": {...}, ...}
    param enc.0.weight SharedEncoder 8x3x3x3 0 864
    ...
    end <payload bytes>
    <payload>

``offset`` and ``nbytes`` are relative to the start of the payload.
"""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .model import Model, ModelConfig, ParamSet, PartitionTag, init_model
from .specfun import RngStream

__all__ = [
    "CheckpointError",
    "CheckpointManifestError",
    "CheckpointTruncatedError",
    "CheckpointVersionError",
    "checkpoint_read",
    "checkpoint_write",
    "write_csv",
]

MAGIC = "TRFEDDIS-CKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointManifestError(CheckpointError):
    pass


def checkpoint_write(model: Model, path, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{MAGIC} {VERSION}"]
    header = {"model": model.config.to_dict(), "trainable": list(model.trainable)} | dict(meta or {})
    lines.append("meta " + json.dumps(header, sort_keys=True))
    chunks, offset = [], 0
    for name, arr in model.params.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        shape = "x".join(str(n) for n in arr.shape) or "scalar"
        lines.append(f"param {name} {model.params.tags[name].value} {shape} {offset} {len(data)}")
        chunks.append(data)
        offset += len(data)
    lines.append(f"end {offset}")
    path.write_bytes(("\n".join(lines) + "\n").encode("utf-8") + b"".join(chunks))
    return path


def checkpoint_read(path) -> tuple[Model, dict]:
    """Load a checkpoint; returns ``(model, meta)``."""
    raw = Path(path).read_bytes()
    pos = 0

    def next_line():
        nonlocal pos
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise CheckpointTruncatedError(f"{path}: manifest ends unexpectedly")
        line = raw[pos:nl].decode("utf-8")
        pos = nl + 1
        return line

    first = next_line().split(" ")
    if len(first) != 2 or first[0] != MAGIC:
        raise CheckpointManifestError(f"{path}: not a checkpoint file")
    if first[1] != str(VERSION):
        raise CheckpointVersionError(f"{path}: checkpoint version {first[1]}, expected {VERSION}")
    line = next_line()
    if not line.startswith("meta "):
        raise CheckpointManifestError(f"{path}: missing meta line")
    meta = json.loads(line[5:])
    entries = []
    while True:
        line = next_line()
        if line.startswith("end "):
            total = int(line[4:])
            break
        parts = line.split(" ")
        if len(parts) != 6 or parts[0] != "param":
            raise CheckpointManifestError(f"{path}: malformed manifest line {line!r}")
        _, name, tag, shape, off, nbytes = parts
        dims = () if shape == "scalar" else tuple(int(n) for n in shape.split("x"))
        entries.append((name, tag, dims, int(off), int(nbytes)))

    payload = raw[pos:]
    if len(payload) < total:
        raise CheckpointTruncatedError(f"{path}: payload has {len(payload)} bytes, manifest says {total}")
    if len(payload) > total:
        raise CheckpointManifestError(f"{path}: {len(payload) - total} trailing bytes after payload")

    arrays, tags, expected = {}, {}, 0
    for name, tag, dims, off, nbytes in entries:
        if name in arrays:
            raise CheckpointManifestError(f"{path}: parameter {name!r} listed twice")
        if off != expected or nbytes != 4 * int(np.prod(dims, dtype=np.int64)):
            raise CheckpointManifestError(f"{path}: inconsistent offset/size for {name!r}")
        try:
            tags[name] = PartitionTag(tag)
        except ValueError:
            raise CheckpointManifestError(f"{path}: unknown partition tag {tag!r}") from None
        arrays[name] = np.frombuffer(payload, dtype="<f4", count=nbytes // 4, offset=off).astype(np.float32).reshape(dims)
        expected = off + nbytes
    if expected != total:
        raise CheckpointManifestError(f"{path}: manifest sizes do not add up to the payload")

    config = ModelConfig.from_dict(meta.pop("model"))
    trainable = tuple(meta.pop("trainable"))
    template = init_model(config, RngStream(0))
    if list(template.params) != list(arrays) or any(template.params.tags[n] != tags[n] for n in arrays):
        raise CheckpointManifestError(f"{path}: parameters do not match the recorded architecture")
    if any(template.params[n].shape != arrays[n].shape for n in arrays):
        raise CheckpointManifestError(f"{path}: parameter shapes do not match the recorded architecture")
    return Model(config, ParamSet(arrays, tags), trainable), meta


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, header, rows) -> Path:
    """Comma-separated, LF line endings, UTF-8; floats written with ``repr``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        vals = [row[h] for h in header] if isinstance(row, dict) else list(row)
        w.writerow([_fmt(v) for v in vals])
    path.write_text(buf.getvalue(), encoding="utf-8", newline="")
    return path
