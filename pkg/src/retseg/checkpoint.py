"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"RSEG"                      magic
    u32  version (= 1)
    u32  n, n bytes              UTF-8 config text (key=value lines)
    repeated per parameter, in canonical order:
        u32 n, n bytes           UTF-8 parameter name
        u32 rank
        u64 * rank               dims
        f64 * prod(dims)         row-major values

The parameter list is not length-prefixed; a file that ends early on a record
boundary is detected by comparing against the names the config implies.
"""
from __future__ import annotations

import io
import os
import struct
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointError,
    CheckpointMagicError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)
from .model import RetSegConfig, RetSegParams, param_shapes
from .tensor import Tensor

MAGIC = b"RSEG"
VERSION = 1


def dumps(params: RetSegParams, config: RetSegConfig) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    text = config.to_text().encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    for name, t in params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", t.data.ndim))
        buf.write(struct.pack(f"<{t.data.ndim}Q", *t.data.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(params: RetSegParams, config: RetSegConfig, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(params, config))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(f"file truncated while reading {what} at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    @property
    def done(self) -> bool:
        return self.pos == len(self.data)


def loads(data: bytes) -> tuple[RetSegParams, RetSegConfig]:
    r = _Reader(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise CheckpointMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    r.pos = 4
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
    text = r.take(r.u32("config length"), "config text").decode("utf-8")
    config = RetSegConfig.from_text(text)
    expected = param_shapes(config)
    params = RetSegParams()
    while not r.done:
        name = r.take(r.u32("name length"), "parameter name").decode("utf-8")
        rank = r.u32(f"rank of {name}")
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank, f"dims of {name}"))
        count = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(r.take(8 * count, f"values of {name}"), dtype="<f8").astype(np.float64)
        if name not in expected:
            raise CheckpointError(f"unexpected parameter {name!r} for the stored config")
        if tuple(dims) != expected[name]:
            raise CheckpointError(f"parameter {name!r} has shape {dims}, config implies {expected[name]}")
        if name in params:
            raise CheckpointError(f"duplicate parameter {name!r}")
        params[name] = Tensor(values.reshape(dims), requires_grad=True, name=name)
    missing = [n for n in expected if n not in params]
    if missing:
        raise CheckpointTruncatedError(
            f"file ends after {len(params)} of {len(expected)} parameters (first missing: {missing[0]})"
        )
    ordered = RetSegParams((n, params[n]) for n in expected)
    return ordered, config


def load_checkpoint(path) -> tuple[RetSegParams, RetSegConfig]:
    return loads(Path(path).read_bytes())
