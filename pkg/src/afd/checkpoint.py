"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"AFDC" | u32 version | u32 entry count
    per entry: u16 name length | name (utf-8) | u8 rank | u32 dim * rank | f32 data
    u32 metadata length | metadata (utf-8 JSON)

Entries are written in the model's parameter order and the JSON is emitted
with sorted keys, so load-then-save reproduces the input bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from afd.errors import FormatError
from afd.model import Architecture, ModelBundle

MAGIC = b"AFDC"
VERSION = 1


def encode(params: dict[str, np.ndarray], metadata: dict | None = None) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, arr in params.items():
        key = name.encode("utf-8")
        arr = np.asarray(arr)
        out.append(struct.pack("<H", len(key)) + key)
        out.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    meta = json.dumps(metadata or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out.append(struct.pack("<I", len(meta)) + meta)
    return b"".join(out)


def decode(raw: bytes, source: str = "<bytes>") -> tuple[dict[str, np.ndarray], dict]:
    def need(pos, n):
        if pos + n > len(raw):
            raise FormatError(f"{source}: truncated checkpoint at byte {pos}")

    if raw[:4] != MAGIC:
        raise FormatError(f"{source}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    need(4, 8)
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    pos, params = 12, {}
    for _ in range(count):
        need(pos, 2)
        (klen,) = struct.unpack_from("<H", raw, pos)
        need(pos + 2, klen + 1)
        name = raw[pos + 2 : pos + 2 + klen].decode("utf-8")
        rank = raw[pos + 2 + klen]
        pos += 3 + klen
        need(pos, 4 * rank)
        shape = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        need(pos, nbytes)
        if name in params:
            raise FormatError(f"{source}: duplicate entry {name!r}")
        params[name] = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += nbytes
    need(pos, 4)
    (mlen,) = struct.unpack_from("<I", raw, pos)
    need(pos + 4, mlen)
    if pos + 4 + mlen != len(raw):
        raise FormatError(f"{source}: {len(raw) - pos - 4 - mlen} trailing bytes after metadata")
    try:
        meta = json.loads(raw[pos + 4 : pos + 4 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{source}: metadata is not valid JSON ({e})") from None
    return params, meta


def save(path, model: ModelBundle, **metadata) -> Path:
    meta = {"arch": model.arch.to_dict(), **metadata}
    path = Path(path)
    path.write_bytes(encode(model.params, meta))
    return path


def load(path) -> tuple[ModelBundle, dict]:
    path = Path(path)
    params, meta = decode(path.read_bytes(), str(path))
    if "arch" not in meta:
        raise FormatError(f"{path}: metadata lacks an architecture description")
    arch = Architecture.from_dict(meta["arch"])
    expected = dict(arch.param_shapes())
    expected.update({"fc.weight": (arch.num_classes, arch.feature_dim), "fc.bias": (arch.num_classes,)})
    if "d1.weight" in params or "d2.weight" in params:
        fd = arch.feature_dim
        expected.update({"d1.weight": (fd, fd), "d1.bias": (fd,), "d2.weight": (fd, fd), "d2.bias": (fd,)})
    got = {k: v.shape for k, v in params.items()}
    if got != {k: tuple(v) for k, v in expected.items()}:
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        raise FormatError(f"{path}: parameters do not match the architecture (missing {missing}, unexpected {extra}, "
                          "or shape mismatch)")
    return ModelBundle(arch, params), meta
