"""Binary to grayscale image mapping (B2M) and binary PGM I/O."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import EmptyBinary, FormatError

WIDTH = 256


@dataclass(frozen=True, eq=False)
class GrayImage:
    """8-bit grayscale raster, stored as a ``(height, width)`` uint8 array."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise FormatError(f"image must be a non-empty 2-D array, got shape {px.shape}")
        if px.dtype != np.uint8:
            if np.any(px < 0) or np.any(px > 255):
                raise FormatError("pixel values must lie in [0, 255]")
            px = px.astype(np.uint8)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def __eq__(self, other):
        if not isinstance(other, GrayImage):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(np.array_equal(self.pixels, other.pixels))


def b2m_encode(data: bytes) -> GrayImage:
    """Lay the bytes of a binary out row-major in a 256-pixel-wide raster.

    Byte ``i`` lands at ``(i // 256, i % 256)``; the last row is zero padded,
    so the original length must be kept elsewhere (the manifest's
    ``orig_len``) to decode losslessly.
    """
    buf = np.frombuffer(bytes(data), dtype=np.uint8)
    if buf.size == 0:
        raise EmptyBinary("cannot encode an empty binary")
    height = math.ceil(buf.size / WIDTH)
    px = np.zeros(height * WIDTH, dtype=np.uint8)
    px[: buf.size] = buf
    return GrayImage(px.reshape(height, WIDTH))


def b2m_decode(img: GrayImage, orig_len: int) -> bytes:
    """Inverse of :func:`b2m_encode` given the pre-padding byte count."""
    if not 0 < orig_len <= img.pixels.size:
        raise FormatError(f"orig_len {orig_len} inconsistent with {img.pixels.size} pixels")
    return img.pixels.reshape(-1)[:orig_len].tobytes()


def encode_file(path) -> tuple[GrayImage, int]:
    with open(path, "rb") as fh:
        data = fh.read()
    return b2m_encode(data), len(data)


def pgm_bytes(img: GrayImage) -> bytes:
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + img.pixels.tobytes()


def write_pgm(img: GrayImage, path) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(pgm_bytes(img))
    os.replace(tmp, path)


def _header_tokens(raw: bytes):
    # P5 header: 4 whitespace separated tokens, '#' comments allowed,
    # exactly one whitespace byte between maxval and the payload.
    tokens = []
    pos = 0
    n = len(raw)
    while len(tokens) < 4:
        while pos < n and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < n and raw[pos : pos + 1] == b"#":
            while pos < n and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not raw[pos : pos + 1].isspace() and raw[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        tokens.append(raw[start:pos])
    if pos >= n or not raw[pos : pos + 1].isspace():
        raise FormatError("PGM header not terminated by whitespace")
    return tokens, pos + 1


def parse_pgm(raw: bytes) -> GrayImage:
    tokens, offset = _header_tokens(raw)
    if tokens[0] != b"P5":
        raise FormatError(f"not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"non-integer PGM header field: {exc}") from None
    if width < 1 or height < 1:
        raise FormatError(f"invalid PGM size {width}x{height}")
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}; only 255 is accepted")
    payload = raw[offset:]
    if len(payload) < width * height:
        raise FormatError(f"truncated PGM payload: {len(payload)} of {width * height} bytes")
    if len(payload) > width * height:
        raise FormatError("trailing bytes after PGM payload")
    px = np.frombuffer(payload, dtype=np.uint8).reshape(height, width).copy()
    return GrayImage(px)


def read_pgm(path) -> GrayImage:
    with open(path, "rb") as fh:
        return parse_pgm(fh.read())
