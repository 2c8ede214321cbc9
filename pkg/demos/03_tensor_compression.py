"""t-SVD of a small tensor, truncation error, and compression of a sample's segments."""

import numpy as np

from codetensor.tensor import compress_sample, rank_r_approx, rank_r_error, t_product, t_svd, t_transpose

rng = np.random.default_rng(1)
a = rng.standard_normal((6, 5, 4))
u, s, v = t_svd(a)
back = t_product(t_product(u, s), t_transpose(v))
print("reconstruction error", np.linalg.norm(back - a))

for r in range(1, 6):
    direct = np.sum((a - rank_r_approx(a, r)) ** 2)
    print(f"rank {r}: squared error {direct:8.4f}  from discarded singular values {rank_r_error(a, r):8.4f}")

segments = [rng.integers(0, 256, (h, 256)) for h in (64, 96, 130)]
mats = compress_sample(segments, r=8)
print(f"{len(segments)} segments -> {len(mats)} matrices of shape {mats[0].shape}, "
      f"range [{min(m.min() for m in mats):.3f}, {max(m.max() for m in mats):.3f}]")
