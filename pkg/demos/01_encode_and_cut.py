"""Turn a synthetic binary into a grayscale image and cut it into texture bands."""

import numpy as np

from codetensor.corpus import synth_bytes
from codetensor.encoding import b2m_decode, b2m_encode
from codetensor.segmentation import cut_image, filter_valid

rng = np.random.default_rng(0)
data = synth_bytes(1, rng)
img = b2m_encode(data)
print(f"{len(data)} bytes -> {img.height}x{img.width} image")
assert b2m_decode(img, len(data)) == data

segments = cut_image(img, threshold=0.05, source="demo")
valid = filter_valid(segments)
print(f"{len(segments)} segments, {len(valid)} of at least 64 rows")
for s in valid:
    f = s.features
    print(f"  rows {s.row_start:4d}-{s.row_end:4d}  entropy {f.entropy:.3f}  contrast {f.contrast:.3f}"
          f"  homogeneity {f.homogeneity:.3f}  asm {f.asm:.3f}")
