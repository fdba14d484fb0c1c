"""Self-describing single-file checkpoints.

Byte layout (all integers little-endian)::

    magic        4 bytes  b"SCNN"
    version      u16      1
    flags        u16      0
    desc_len     u32
    descriptor   desc_len bytes of UTF-8 JSON (architecture, sorted keys)
    n_params     u32
    n_params times:
        name_len u16, name (UTF-8), ndim u8, ndim x u32 dims,
        prod(dims) x float32
    crc32        u32 over every preceding byte

Parameters appear in graph-topological then field order.  The descriptor is
plain data: layer kinds are looked up in a fixed table, never evaluated.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .graph import NetworkGraph
from .layers import layer_from_config

MAGIC = b"SCNN"
VERSION = 1


class ModelFormatError(Exception):
    """Base class for unreadable checkpoints."""


class BadMagicError(ModelFormatError):
    pass


class UnsupportedVersionError(ModelFormatError):
    pass


class ChecksumMismatchError(ModelFormatError):
    pass


class ShapeMismatchError(ModelFormatError):
    pass


class TruncatedFileError(ModelFormatError):
    pass


def describe(net: NetworkGraph) -> dict:
    return {
        "family": net.family,
        "input_shape": list(net.input_shape),
        "main_head": net.main_head,
        "aux_heads": [[name, weight] for name, weight in net.aux_heads.items()],
        "meta": net.meta,
        "nodes": [{"name": n.name, "kind": n.layer.kind, "inputs": list(n.inputs), "config": n.layer.config()}
                  for n in net.nodes],
    }


def graph_from_descriptor(desc: dict) -> NetworkGraph:
    net = NetworkGraph(desc["input_shape"], family=desc["family"])
    for node in desc["nodes"]:
        net.add(node["name"], layer_from_config(node["kind"], node["config"]), tuple(node["inputs"]))
    net.main_head = desc["main_head"]
    net.aux_heads = {name: float(weight) for name, weight in desc["aux_heads"]}
    net.meta = dict(desc.get("meta", {}))
    return net


def model_to_bytes(net: NetworkGraph) -> bytes:
    desc = json.dumps(describe(net), sort_keys=True, separators=(",", ":")).encode()
    params = list(net.parameters())
    parts = [MAGIC, struct.pack("<HHI", VERSION, 0, len(desc)), desc, struct.pack("<I", len(params))]
    for name, value in params:
        encoded = name.encode()
        parts.append(struct.pack("<H", len(encoded)) + encoded + struct.pack("<B", value.ndim))
        parts.append(struct.pack(f"<{value.ndim}I", *value.shape))
        parts.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes, end: int):
        self.buf, self.pos, self.end = buf, 0, end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise TruncatedFileError(f"file ends inside a record at byte {self.pos} (needs {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _parse(buf: bytes):
    if len(buf) < 4 or buf[:4] != MAGIC:
        if len(buf) < 4 and MAGIC.startswith(buf):
            raise TruncatedFileError("file shorter than the magic number")
        raise BadMagicError(f"expected magic {MAGIC!r}, found {buf[:4]!r}")
    if len(buf) < 8:
        raise TruncatedFileError("file ends inside the header")
    version, flags = struct.unpack("<HH", buf[4:8])
    if version != VERSION:
        raise UnsupportedVersionError(f"format version {version} not supported (expected {VERSION})")
    r = _Reader(buf, len(buf) - 4)
    r.take(8)
    (desc_len,) = r.unpack("<I")
    desc = r.take(desc_len)
    (count,) = r.unpack("<I")
    blobs = []
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len)
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}I")
        data = r.take(4 * math.prod(dims))
        blobs.append((name, dims, data))
    if r.pos != r.end:
        raise TruncatedFileError(f"{r.end - r.pos} unexpected bytes before the checksum")
    (stored,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != stored:
        raise ChecksumMismatchError("CRC-32 does not match file contents")
    return desc, blobs


def param_blobs(source) -> dict[str, bytes]:
    """Raw little-endian float32 bytes of each parameter, keyed by qualified name."""
    buf = source if isinstance(source, (bytes, bytearray)) else Path(source).read_bytes()
    _, blobs = _parse(bytes(buf))
    return {name.decode(): data for name, _, data in blobs}


def model_from_bytes(buf: bytes) -> NetworkGraph:
    desc_bytes, blobs = _parse(bytes(buf))
    try:
        net = graph_from_descriptor(json.loads(desc_bytes.decode()))
    except (ValueError, KeyError, TypeError) as exc:
        raise ModelFormatError(f"invalid architecture descriptor: {exc}") from None
    expected = {name: p.shape for name, p in net.parameters()}
    seen = set()
    for raw_name, dims, data in blobs:
        name = raw_name.decode()
        if name not in expected:
            raise ShapeMismatchError(f"parameter {name!r} not present in the architecture")
        if name in seen:
            raise ShapeMismatchError(f"parameter {name!r} stored twice")
        if tuple(dims) != expected[name]:
            raise ShapeMismatchError(f"parameter {name!r}: stored shape {tuple(dims)}, architecture {expected[name]}")
        seen.add(name)
        net.set_param(name, np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(dims))
    missing = sorted(set(expected) - seen)
    if missing:
        raise ShapeMismatchError(f"parameters missing from file: {missing}")
    net.validate()
    return net


def save_model(net: NetworkGraph, path) -> None:
    """Write atomically (temporary file in the target directory, then rename)."""
    path = Path(path)
    data = model_to_bytes(net)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_model(path) -> NetworkGraph:
    return model_from_bytes(Path(path).read_bytes())
