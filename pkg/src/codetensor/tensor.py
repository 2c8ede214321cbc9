"""Third-order tensor algebra under the t-product.

Tensors are plain ``numpy`` arrays of shape ``(I1, I2, I3)``; the third axis
is the tube axis along which the circular convolution of the t-product runs.
Frequency-domain tensors are complex arrays of the same shape, obtained by an
unnormalized DFT of every tube.

The frequency path (per-slice matrix algebra after :func:`dft_mode3`) is the
one used for computation.  :func:`circ`, :func:`matvec` and :func:`fold`
build the equivalent block matrices and exist mainly so results can be
checked against the spatial definition.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateBand, NoSegments, RankError, ShapeError

# imaginary parts larger than this after an inverse DFT mean the input was not
# conjugate symmetric
IMAG_TOL = 1e-8


def _as3(t) -> np.ndarray:
    a = np.asarray(t)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise ShapeError(f"expected a third-order tensor, got shape {a.shape}")
    return a


def dft_mode3(t) -> np.ndarray:
    return np.fft.fft(_as3(t), axis=2)


def idft_mode3(f, real: bool = True) -> np.ndarray:
    """Inverse tube DFT (divides by ``I3``).

    With ``real=True`` the imaginary residue is checked and dropped.
    """
    out = np.fft.ifft(_as3(f), axis=2)
    if not real:
        return out
    scale = max(1.0, float(np.abs(out.real).max(initial=0.0)))
    resid = float(np.abs(out.imag).max(initial=0.0))
    if resid > IMAG_TOL * scale:
        raise ShapeError(f"inverse DFT is not real (imaginary residue {resid:.3g})")
    return np.ascontiguousarray(out.real)


def identity_tensor(n: int, n3: int) -> np.ndarray:
    """Identity under the t-product: first frontal slice ``I``, the rest zero."""
    e = np.zeros((n, n, n3))
    e[:, :, 0] = np.eye(n)
    return e


def matvec(a) -> np.ndarray:
    """Stack the frontal slices vertically into an ``(I1*I3, I2)`` matrix."""
    a = _as3(a)
    i1, i2, i3 = a.shape
    return np.ascontiguousarray(a.transpose(2, 0, 1).reshape(i1 * i3, i2))


def fold(m, i3: int) -> np.ndarray:
    """Inverse of :func:`matvec` for a known number of frontal slices."""
    m = np.asarray(m)
    if m.ndim != 2 or i3 < 1 or m.shape[0] % i3:
        raise ShapeError(f"cannot fold a {m.shape} matrix into {i3} slices")
    i1 = m.shape[0] // i3
    return np.ascontiguousarray(m.reshape(i3, i1, m.shape[1]).transpose(1, 2, 0))


def circ(a) -> np.ndarray:
    """Block-circulant matrix; block ``(p, q)`` is frontal slice ``(p - q) mod I3``."""
    a = _as3(a)
    i1, i2, i3 = a.shape
    out = np.empty((i1 * i3, i2 * i3), dtype=a.dtype)
    for p in range(i3):
        for q in range(i3):
            out[p * i1 : (p + 1) * i1, q * i2 : (q + 1) * i2] = a[:, :, (p - q) % i3]
    return out


def blkdiag(f) -> np.ndarray:
    f = _as3(f)
    i1, i2, i3 = f.shape
    out = np.zeros((i1 * i3, i2 * i3), dtype=np.result_type(f.dtype, np.complex128))
    for p in range(i3):
        out[p * i1 : (p + 1) * i1, p * i2 : (p + 1) * i2] = f[:, :, p]
    return out


def _check_product(a, b):
    if a.shape[1] != b.shape[0] or a.shape[2] != b.shape[2]:
        raise ShapeError(f"t-product shape mismatch: {a.shape} * {b.shape}")


def t_product(a, b) -> np.ndarray:
    """t-product ``a * b`` via per-frequency matrix products."""
    a, b = _as3(a), _as3(b)
    _check_product(a, b)
    fc = np.einsum("ijk,jlk->ilk", dft_mode3(a), dft_mode3(b))
    real = np.isrealobj(a) and np.isrealobj(b)
    return idft_mode3(fc, real=real)


def t_product_spatial(a, b) -> np.ndarray:
    """t-product computed literally as ``fold(circ(a) @ matvec(b))``."""
    a, b = _as3(a), _as3(b)
    _check_product(a, b)
    return fold(circ(a) @ matvec(b), a.shape[2])


def t_transpose(a) -> np.ndarray:
    """Transpose every frontal slice and reverse the order of slices 2..I3."""
    a = _as3(a)
    order = [0] + list(range(a.shape[2] - 1, 0, -1))
    return np.ascontiguousarray(a.transpose(1, 0, 2)[:, :, order].conj())


def _fix_phase(u, vh):
    # first non-negligible entry of every left singular vector becomes real >= 0;
    # the matching right singular vector absorbs the conjugate phase
    idx = np.argmax(np.abs(u) > 1e-12 * max(1.0, float(np.abs(u).max(initial=0.0))), axis=0)
    lead = u[idx, np.arange(u.shape[1])]
    mag = np.abs(lead)
    phase = np.where(mag > 0, lead / np.where(mag > 0, mag, 1.0), 1.0)
    u = u * phase.conj()[None, :]
    k = min(u.shape[1], vh.shape[0])
    vh = vh.copy()
    vh[:k] = vh[:k] * phase[:k, None]
    return u, vh


def _slice_svds(f):
    """SVD of each frequency slice, honouring conjugate symmetry.

    Only slices ``0..I3//2`` are decomposed; the remaining ones are the
    conjugates of their mirror slices, which keeps the inverse DFT real.
    """
    i1, i2, i3 = f.shape
    us = np.zeros((i1, i1, i3), dtype=complex)
    ss = np.zeros((min(i1, i2), i3))
    vhs = np.zeros((i2, i2, i3), dtype=complex)
    for p in range(i3 // 2 + 1):
        sl = f[:, :, p]
        if p == 0 or 2 * p == i3:
            u, s, vh = np.linalg.svd(sl.real)
            u, vh = u.astype(complex), vh.astype(complex)
        else:
            u, s, vh = np.linalg.svd(sl)
        u, vh = _fix_phase(u, vh)
        us[:, :, p], ss[:, p], vhs[:, :, p] = u, s, vh
        q = (i3 - p) % i3
        if q != p:
            us[:, :, q], ss[:, q], vhs[:, :, q] = u.conj(), s, vh.conj()
    return us, ss, vhs


def t_svd(t):
    """t-SVD ``t = U * S * V^T`` (``^T`` being :func:`t_transpose`).

    Returns real tensors ``U`` (I1xI1xI3), ``S`` (I1xI2xI3, f-diagonal) and
    ``V`` (I2xI2xI3).
    """
    t = _as3(t).astype(float)
    i1, i2, i3 = t.shape
    us, ss, vhs = _slice_svds(dft_mode3(t))
    s_freq = np.zeros((i1, i2, i3), dtype=complex)
    r = min(i1, i2)
    s_freq[np.arange(r), np.arange(r), :] = ss
    v_freq = vhs.conj().transpose(1, 0, 2)
    return idft_mode3(us), idft_mode3(s_freq), idft_mode3(v_freq)


def singular_tubes(t) -> np.ndarray:
    """Frequency-domain singular values, shape ``(min(I1, I2), I3)``, descending per slice."""
    t = _as3(t).astype(float)
    f = dft_mode3(t)
    return np.stack([np.linalg.svd(f[:, :, p], compute_uv=False) for p in range(t.shape[2])], axis=1)


def rank_r_approx(t, r: int) -> np.ndarray:
    """Best tubal-rank-``r`` approximation: truncate every frequency-slice SVD at ``r``."""
    t = _as3(t).astype(float)
    i1, i2, i3 = t.shape
    if not 1 <= r <= min(i1, i2):
        raise RankError(f"rank {r} outside [1, {min(i1, i2)}]")
    us, ss, vhs = _slice_svds(dft_mode3(t))
    approx = np.einsum("irk,rk,rjk->ijk", us[:, :r], ss[:r], vhs[:r])
    return idft_mode3(approx)


def rank_r_sum(u, s, v, r: int) -> np.ndarray:
    """Truncated sum of t-products of the leading ``r`` lateral slices of ``U``, ``S`` and ``V^T``."""
    vt = t_transpose(v)
    out = np.zeros((u.shape[0], vt.shape[1], u.shape[2]))
    for i in range(r):
        tube = s[i : i + 1, i : i + 1, :]
        out += t_product(t_product(u[:, i : i + 1, :], tube), vt[i : i + 1, :, :])
    return out


def rank_r_error(t, r: int) -> float:
    """Squared Frobenius error predicted from the discarded frequency singular values."""
    sv = singular_tubes(t)
    return float((sv[r:] ** 2).sum() / sv.shape[1])


# ---------------------------------------------------------------------------
# sample compression

FEATURE_SIZE = 64


def pool_segment(pixels, size: int = FEATURE_SIZE) -> np.ndarray:
    """Mean-pool a ``(h, 256)`` band to ``size x size`` values in [0, 1].

    Columns are averaged in equal groups (256 -> 64 is a 4x column mean);
    rows are averaged over ``size`` nearly equal bands.
    """
    px = np.asarray(pixels, dtype=float)
    h, w = px.shape
    if h < size or w < size or w % size:
        raise DegenerateBand(f"segment {h}x{w} cannot be pooled to {size}x{size}")
    cols = px.reshape(h, size, w // size).mean(axis=2)
    edges = (np.arange(size + 1) * h) // size
    rows = np.add.reduceat(cols, edges[:-1], axis=0) / np.diff(edges)[:, None]
    return rows / 255.0


def stack_segments(segments) -> np.ndarray:
    mats = [pool_segment(getattr(s, "pixels", s)) for s in segments]
    if not mats:
        raise NoSegments("no segments to compress")
    return np.stack(mats, axis=2)


def compress_sample(segments, r: int = FEATURE_SIZE) -> list[np.ndarray]:
    """Pool each segment to 64x64, stack, truncate to tubal rank ``r``, split slices.

    ``segments`` holds :class:`~codetensor.segmentation.TextureSegment`
    objects or raw pixel bands. One 64x64 matrix in [0, 1] comes back per
    input segment.
    """
    t = stack_segments(segments)
    approx = rank_r_approx(t, min(FEATURE_SIZE, int(r)))
    np.clip(approx, 0.0, 1.0, out=approx)
    return [np.ascontiguousarray(approx[:, :, k]) for k in range(approx.shape[2])]
