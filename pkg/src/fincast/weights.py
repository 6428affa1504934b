"""Binary weight file: magic, version, config digest, manifest, float32 payload.

Layout (little-endian)::

    b"FNCT" | u32 version | 32B config digest | 32B payload sha256
    | u32 config text length | config text (utf-8)
    | u32 entry count | entries: u16 name length, name, u8 ndim, u32 dims..., u64 offset
    | payload: float32 values, entries back to back
"""
from __future__ import annotations

import hashlib
import io
import os
import struct

import numpy as np

from . import tensor_core as tc

MAGIC = b"FNCT"
VERSION = 1


class WeightFileError(Exception):
    code = 10


class TruncatedFileError(WeightFileError):
    code = 11


class BadMagicError(WeightFileError):
    code = 12


class DigestMismatchError(WeightFileError):
    code = 13


class PayloadCorruptError(WeightFileError):
    code = 14


class UnsupportedVersionError(WeightFileError):
    code = 15


def _check_path(path):
    if path is None or str(path) == "":
        raise ValueError("empty weight file path")
    return os.fspath(path)


def encode(model) -> bytes:
    from .model import ModelConfig  # noqa: F401  (type only)

    cfg = model.config
    names = sorted(model.params)
    payload = io.BytesIO()
    manifest = io.BytesIO()
    manifest.write(struct.pack("<I", len(names)))
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(model.params[name].data, dtype="<f4")
        raw = name.encode()
        manifest.write(struct.pack("<H", len(raw)) + raw)
        manifest.write(struct.pack("<B", arr.ndim))
        manifest.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        manifest.write(struct.pack("<Q", offset))
        payload.write(arr.tobytes())
        offset += arr.nbytes
    body = payload.getvalue()
    text = cfg.canonical().encode()
    head = MAGIC + struct.pack("<I", VERSION) + cfg.digest() + hashlib.sha256(body).digest()
    return head + struct.pack("<I", len(text)) + text + manifest.getvalue() + body


def save_weights(model, path):
    path = _check_path(path)
    data = encode(model)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"file ends at byte {len(self.buf)}, needed {self.pos + n}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf, config=None, dtype=np.float64):
    from .config import parse_model_config
    from .model import FinCastModel, param_shapes

    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise BadMagicError("not a weight file (bad magic bytes)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise UnsupportedVersionError(f"weight file version {version}, reader supports {VERSION}")
    digest = r.take(32)
    payload_sha = r.take(32)
    (tlen,) = r.unpack("<I")
    text = r.take(tlen).decode()
    stored_cfg = parse_model_config(text)
    if stored_cfg.digest() != digest:
        raise DigestMismatchError("embedded config does not match its digest")
    if config is not None and config.digest() != digest:
        raise DigestMismatchError("weight file was written for a different model config")
    (count,) = r.unpack("<I")
    entries = []
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        (offset,) = r.unpack("<Q")
        entries.append((name, tuple(shape), offset))
    body = buf[r.pos:]
    expected_len = sum(int(np.prod(s)) * 4 for _, s, _ in entries)
    if len(body) < expected_len:
        raise TruncatedFileError(f"payload holds {len(body)} bytes, manifest needs {expected_len}")
    if len(body) > expected_len:
        raise PayloadCorruptError("trailing bytes after payload")
    if hashlib.sha256(body).digest() != payload_sha:
        raise PayloadCorruptError("payload checksum mismatch")
    shapes = param_shapes(stored_cfg)
    params = {}
    for name, shape, offset in entries:
        if shapes.get(name) != shape:
            raise DigestMismatchError(f"{name}: stored shape {shape} != config shape {shapes.get(name)}")
        n = int(np.prod(shape))
        arr = np.frombuffer(body, dtype="<f4", count=n, offset=offset).reshape(shape)
        params[name] = tc.Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return FinCastModel(stored_cfg, params)


def load_weights(path, config=None, dtype=np.float64):
    """Read a weight file; refuses files written for a different ``config``."""
    path = _check_path(path)
    with open(path, "rb") as fh:
        return decode(fh.read(), config=config, dtype=dtype)
