"""Self-growing texture segmentation of B2M images.

The image is scanned top to bottom in cells of two rows. A cell whose pixels
are all equal (within ``eps``) is *degraded*: it is dropped and ends the
segment being grown. Otherwise the cell joins the current segment when the
GLCM feature distance to the previous cell is below ``threshold``, and starts
a new segment when it is not.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoding import GrayImage
from .errors import DegenerateBand, ImageTooSmall

CELL_ROWS = 2
MIN_SEGMENT_ROWS = 64
DEFAULT_THRESHOLD = 0.05
DEFAULT_LEVELS = 16
DEFAULT_OFFSET = (1, 0)


@dataclass(frozen=True)
class GlcmFeatures:
    entropy: float
    contrast: float
    homogeneity: float
    asm: float

    def as_array(self) -> np.ndarray:
        return np.array([self.entropy, self.contrast, self.homogeneity, self.asm])


@dataclass(eq=False)
class TextureSegment:
    source: str
    row_start: int
    row_end: int
    pixels: np.ndarray
    features: GlcmFeatures
    disposed: bool = field(default=True)

    @property
    def height(self) -> int:
        return self.row_end - self.row_start

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def quantize(pixels, levels: int) -> np.ndarray:
    return (np.asarray(pixels, dtype=np.int64) * levels) // 256


def glcm(band, levels: int = DEFAULT_LEVELS, offset=DEFAULT_OFFSET) -> np.ndarray:
    """Symmetric, normalized gray-level co-occurrence matrix.

    ``offset`` is ``(dx, dy)``: column shift, then row shift. Pixel values are
    quantized to ``floor(p * levels / 256)``.
    """
    if not 2 <= levels <= 256:
        raise ValueError(f"levels must be in [2, 256], got {levels}")
    q = quantize(np.atleast_2d(band), levels)
    dx, dy = offset
    h, w = q.shape
    if abs(dx) >= w or abs(dy) >= h or (dx == 0 and dy == 0):
        raise DegenerateBand(f"band {h}x{w} has no pixel pairs at offset {offset}")
    a = q[max(0, -dy) : h - max(0, dy), max(0, -dx) : w - max(0, dx)]
    b = q[max(0, dy) : h - max(0, -dy), max(0, dx) : w - max(0, -dx)]
    counts = np.bincount((a * levels + b).ravel(), minlength=levels * levels)
    m = counts.reshape(levels, levels).astype(float)
    m += m.T
    return m / m.sum()


def glcm_features(m) -> GlcmFeatures:
    """Entropy, contrast, homogeneity and ASM of a GLCM, each scaled into [0, 1].

    Entropy is divided by ``log(L**2)`` and contrast by ``(L - 1)**2``.
    """
    m = np.asarray(m, dtype=float)
    levels = m.shape[0]
    i, j = np.indices(m.shape)
    d2 = (i - j) ** 2
    nz = m[m > 0]
    entropy = float(-(nz * np.log(nz)).sum() / np.log(levels * levels))
    contrast = float((d2 * m).sum() / (levels - 1) ** 2)
    homogeneity = float((m / (1.0 + d2)).sum())
    asm = float((m * m).sum())
    clip = lambda v: min(1.0, max(0.0, v))  # noqa: E731 - float round-off only
    return GlcmFeatures(clip(entropy), clip(contrast), clip(homogeneity), clip(asm))


def band_features(band, levels: int = DEFAULT_LEVELS, offset=DEFAULT_OFFSET) -> GlcmFeatures:
    return glcm_features(glcm(band, levels, offset))


def feature_distance(a: GlcmFeatures, b: GlcmFeatures) -> float:
    return float(np.linalg.norm(a.as_array() - b.as_array()))


def is_degraded(cell, eps: float = 0.0) -> bool:
    cell = np.asarray(cell)
    return float(cell.max()) - float(cell.min()) <= eps


def _pixels(img):
    return img.pixels if isinstance(img, GrayImage) else np.asarray(img)


def cell_features(img, levels: int = DEFAULT_LEVELS, offset=DEFAULT_OFFSET, eps: float = 0.0):
    """Per-cell features; ``None`` marks a degraded cell.

    A trailing odd row (never a full cell) is ignored.
    """
    px = _pixels(img)
    out = []
    for c in range(px.shape[0] // CELL_ROWS):
        cell = px[c * CELL_ROWS : (c + 1) * CELL_ROWS]
        out.append(None if is_degraded(cell, eps) else band_features(cell, levels, offset))
    return out


def cut_image(
    img,
    threshold: float = DEFAULT_THRESHOLD,
    *,
    levels: int = DEFAULT_LEVELS,
    offset=DEFAULT_OFFSET,
    eps: float = 0.0,
    source: str = "",
) -> list[TextureSegment]:
    px = _pixels(img)
    if px.shape[0] < CELL_ROWS:
        raise ImageTooSmall(f"image height {px.shape[0]} < {CELL_ROWS}")
    feats = cell_features(px, levels, offset, eps)

    bands = []
    start = None
    prev = None
    for c, f in enumerate(feats):
        if f is None:
            if start is not None:
                bands.append((start, c))
            start = prev = None
            continue
        if start is not None and feature_distance(prev, f) < threshold:
            prev = f
            continue
        if start is not None:
            bands.append((start, c))
        start, prev = c, f
    if start is not None:
        bands.append((start, len(feats)))

    segments = []
    for c0, c1 in bands:
        r0, r1 = c0 * CELL_ROWS, c1 * CELL_ROWS
        band = px[r0:r1].copy()
        segments.append(TextureSegment(source, r0, r1, band, band_features(band, levels, offset)))
    return segments


def filter_valid(segments, min_rows: int = MIN_SEGMENT_ROWS) -> list[TextureSegment]:
    return [s for s in segments if s.height >= min_rows]
