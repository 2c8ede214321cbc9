"""Binary containers for tensors (``CTEN``) and model parameters (``CMDL``).

CTEN layout::

    b"CTEN" | u32 I1 | u32 I2 | u32 I3 | I1*I2*I3 x f64

all little endian, element ``(i, j, k)`` at offset ``(k*I1 + i)*I2 + j``.

CMDL layout::

    b"CMDL" | u8 kind | u32 meta_len | meta (UTF-8 JSON) | u32 n_blobs
    then per blob: u16 name_len | name | u8 ndim | ndim x u32 | f64 data

Blob order is preserved, so a round trip is byte-identical.
"""

from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict

import numpy as np

from .errors import FormatError

CTEN_MAGIC = b"CTEN"
CMDL_MAGIC = b"CMDL"

KIND_CODES = {"LR": 1, "NB": 2, "DT": 3, "MLP": 4, "NET": 16, "GAN": 17}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}


def _atomic_write(path, payload: bytes):
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def tensor_bytes(t) -> bytes:
    t = np.asarray(t, dtype="<f8")
    if t.ndim == 2:
        t = t[:, :, None]
    if t.ndim != 3:
        raise FormatError(f"CTEN holds third-order tensors, got shape {t.shape}")
    i1, i2, i3 = t.shape
    body = np.ascontiguousarray(t.transpose(2, 0, 1)).tobytes()
    return CTEN_MAGIC + struct.pack("<III", i1, i2, i3) + body


def parse_tensor(raw: bytes) -> np.ndarray:
    if len(raw) < 16 or raw[:4] != CTEN_MAGIC:
        raise FormatError("not a CTEN tensor file")
    i1, i2, i3 = struct.unpack_from("<III", raw, 4)
    n = i1 * i2 * i3
    if n == 0 or len(raw) != 16 + 8 * n:
        raise FormatError(f"CTEN payload size mismatch for dims {(i1, i2, i3)}")
    flat = np.frombuffer(raw, dtype="<f8", offset=16, count=n)
    return np.ascontiguousarray(flat.reshape(i3, i1, i2).transpose(1, 2, 0)).astype(float)


def write_tensor(t, path):
    _atomic_write(path, tensor_bytes(t))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return parse_tensor(fh.read())


def model_bytes(kind: str, blobs, meta=None) -> bytes:
    if kind not in KIND_CODES:
        raise FormatError(f"unknown model kind {kind!r}")
    meta_raw = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [CMDL_MAGIC, struct.pack("<BI", KIND_CODES[kind], len(meta_raw)), meta_raw]
    items = list(blobs.items())
    parts.append(struct.pack("<I", len(items)))
    for name, arr in items:
        arr = np.asarray(arr, dtype="<f8")
        key = name.encode("utf-8")
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def parse_model(raw: bytes):
    """Return ``(kind, blobs, meta)`` from CMDL bytes."""
    try:
        if raw[:4] != CMDL_MAGIC:
            raise FormatError("not a CMDL model file")
        code, meta_len = struct.unpack_from("<BI", raw, 4)
        pos = 9
        meta = json.loads(raw[pos : pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        blobs = OrderedDict()
        for _ in range(count):
            (klen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos : pos + klen].decode("utf-8")
            pos += klen
            (ndim,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            n = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * n > len(raw):
                raise FormatError(f"truncated blob {name!r}")
            blobs[name] = np.frombuffer(raw, dtype="<f8", offset=pos, count=n).reshape(shape).astype(float)
            pos += 8 * n
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed CMDL file: {exc}") from None
    if pos != len(raw):
        raise FormatError("trailing bytes in CMDL file")
    if code not in KIND_NAMES:
        raise FormatError(f"unknown model kind code {code}")
    return KIND_NAMES[code], blobs, meta


def write_model(path, kind, blobs, meta=None):
    _atomic_write(path, model_bytes(kind, blobs, meta))


def read_model(path):
    with open(path, "rb") as fh:
        return parse_model(fh.read())
