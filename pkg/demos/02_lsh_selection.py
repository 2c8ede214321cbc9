"""Index segments from a handful of samples and keep the distinctive ones."""

import numpy as np

from codetensor.corpus import synth_bytes
from codetensor.encoding import b2m_encode
from codetensor.lsh import LshParams, build_index, lsh_search, get_vec, select_significant
from codetensor.segmentation import cut_image, filter_valid

per_sample = {}
for n in range(8):
    label = n % 2
    img = b2m_encode(synth_bytes(label, np.random.default_rng(n)))
    per_sample[f"{'mal' if label else 'ben'}_{n}"] = filter_valid(cut_image(img, source=f"s{n}"))

index = build_index([s for segs in per_sample.values() for s in segs], LshParams(k=8, l=8, r=0.1))
print(f"indexed {len(index)} segments in {index.params.l} tables")

first = next(iter(per_sample.values()))[0]
print("neighbours of the first segment:", lsh_search(index, get_vec(first), r=0.5)[:5])

for sample, chosen in select_significant(per_sample, index, cap=3).items():
    picks = ", ".join(f"rows {c.segment.row_start}-{c.segment.row_end} (freq {c.bucket_frequency:.2f})" for c in chosen)
    print(f"{sample}: {picks}")
