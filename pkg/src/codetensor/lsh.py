"""Random-hyperplane LSH over segment vectors, and significant-segment selection.

Each of the ``l`` tables hashes a vector to a ``k``-bit signature, bit ``j``
being the sign of its dot product with hyperplane ``j`` of that table. Two
vectors at angle ``theta`` agree on one bit with probability
``1 - theta/pi`` and share a bucket of one table with probability
``(1 - theta/pi) ** k``.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateBand, DimError, FormatError

LSH_MAGIC = b"CLSH"
GRID = 8
METRICS = ("euclidean", "hamming")


@dataclass(frozen=True)
class LshParams:
    k: int = 8
    l: int = 8  # noqa: E741 - conventional name for the table count
    r: float = 0.1
    seed: int = 0
    dim: int = GRID * GRID
    metric: str = "euclidean"

    def __post_init__(self):
        if self.k < 1 or self.k > 64:
            raise ValueError(f"k must be in [1, 64], got {self.k}")
        if self.l < 1:
            raise ValueError(f"l must be >= 1, got {self.l}")
        if not self.r > 0:
            raise ValueError(f"r must be > 0, got {self.r}")
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")


@dataclass
class LshIndex:
    params: LshParams
    hyperplanes: np.ndarray  # (l, k, dim)
    tables: list = field(default_factory=list)  # l dicts: signature -> [ids]
    vectors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    # insertion position of every id (the search routine's hash_id)
    positions: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.vectors)

    def signatures(self, v) -> list[int]:
        return signatures(self.hyperplanes, v)

    def buckets_of(self, v) -> list[list[str]]:
        return [t.get(s, []) for t, s in zip(self.tables, self.signatures(v))]


def segment_id(seg) -> str:
    return f"{seg.source}:{seg.row_start}:{seg.row_end}"


def get_vec(seg) -> np.ndarray:
    """Mean intensity of an 8x8 grid of tiles, row-major, scaled to [0, 1]."""
    px = np.asarray(getattr(seg, "pixels", seg), dtype=float)
    h, w = px.shape
    if h < 64 or w < GRID:
        raise DegenerateBand(f"segment {h}x{w} too small for an {GRID}x{GRID} grid")
    re = (np.arange(GRID + 1) * h) // GRID
    ce = (np.arange(GRID + 1) * w) // GRID
    sums = np.add.reduceat(np.add.reduceat(px, re[:-1], axis=0), ce[:-1], axis=1)
    area = np.outer(np.diff(re), np.diff(ce))
    return (sums / area / 255.0).ravel()


def random_hyperplanes(params: LshParams) -> np.ndarray:
    rng = np.random.default_rng(params.seed)
    planes = rng.standard_normal((params.l, params.k, params.dim))
    planes /= np.linalg.norm(planes, axis=2, keepdims=True)
    return planes


def signature_bits(hyperplanes, v) -> np.ndarray:
    """``(l, k)`` boolean array; a zero dot product counts as a set bit."""
    return np.einsum("lkd,d->lk", hyperplanes, np.asarray(v, dtype=float)) >= 0


def signatures(hyperplanes, v) -> list[int]:
    bits = signature_bits(hyperplanes, v)
    weights = 1 << np.arange(bits.shape[1], dtype=np.uint64)
    return [int(x) for x in (bits.astype(np.uint64) * weights).sum(axis=1)]


def _items(entries):
    for e in entries:
        if isinstance(e, tuple):
            yield str(e[0]), np.asarray(e[1], dtype=float)
        else:
            yield segment_id(e), get_vec(e)


def build_index(entries, params: LshParams) -> LshIndex:
    """Index ``(id, vector)`` pairs or texture segments (keyed by :func:`segment_id`)."""
    index = LshIndex(params, random_hyperplanes(params), [dict() for _ in range(params.l)])
    for ident, vec in _items(entries):
        add(index, ident, vec)
    return index


def add(index: LshIndex, ident: str, vec) -> None:
    vec = np.asarray(vec, dtype=float).ravel()
    if vec.shape[0] != index.params.dim:
        raise DimError(f"vector {ident!r} has dim {vec.shape[0]}, index expects {index.params.dim}")
    if ident in index.vectors:
        raise ValueError(f"duplicate id {ident!r}")
    index.positions[ident] = len(index.vectors)
    index.vectors[ident] = vec
    for table, sig in zip(index.tables, index.signatures(vec)):
        table.setdefault(sig, []).append(ident)


def _distance(index, q, ident, qbits=None):
    if index.params.metric == "hamming":
        other = signature_bits(index.hyperplanes, index.vectors[ident])
        return float(np.count_nonzero(other != qbits))
    return float(np.linalg.norm(index.vectors[ident] - q))


def lsh_search(index: LshIndex, q, r: float | None = None) -> list[str]:
    """Ids sharing a bucket with ``q`` in any table and within distance ``r``.

    Ordered by distance, then id. ``r`` defaults to ``index.params.r``; with
    the Hamming metric it counts differing signature bits.
    """
    return [i for i, _ in lsh_search_with_distance(index, q, r)]


def lsh_search_with_distance(index, q, r=None):
    q = np.asarray(q, dtype=float).ravel()
    if q.shape[0] != index.params.dim:
        raise DimError(f"query dim {q.shape[0]} != index dim {index.params.dim}")
    r = index.params.r if r is None else r
    qbits = signature_bits(index.hyperplanes, q) if index.params.metric == "hamming" else None
    candidates = set()
    for bucket in index.buckets_of(q):
        candidates.update(bucket)
    hits = [(i, _distance(index, q, i, qbits)) for i in candidates]
    hits = [(i, d) for i, d in hits if d <= r]
    hits.sort(key=lambda x: (x[1], x[0]))
    return hits


def linear_scan(index: LshIndex, q, r: float | None = None) -> list[str]:
    """Exact neighbours within ``r`` by brute force (the reference for recall)."""
    q = np.asarray(q, dtype=float).ravel()
    r = index.params.r if r is None else r
    hits = [(i, float(np.linalg.norm(v - q))) for i, v in index.vectors.items()]
    return [i for i, d in sorted(hits, key=lambda x: (x[1], x[0])) if d <= r]


def bucket_frequency(index: LshIndex, ident: str, group_of=None) -> float:
    """Mean over tables of how many groups share ``ident``'s bucket.

    ``group_of`` maps an id to its sample; without it every id is its own group.
    """
    group_of = group_of or (lambda i: i)
    counts = [len({group_of(i) for i in bucket}) for bucket in index.buckets_of(index.vectors[ident])]
    return float(np.mean(counts))


@dataclass(frozen=True)
class Selection:
    segment: object
    rank: int
    bucket_frequency: float


def select_significant(per_sample, index: LshIndex, cap: int = 8) -> "OrderedDict[str, list[Selection]]":
    """Keep at most ``cap`` distinctive, mutually non-duplicate segments per sample.

    Segments are ranked by ascending :func:`bucket_frequency` across samples
    (rarer first; ties keep scan order). A segment that an LSH search finds
    within ``r`` of an already kept segment of the same sample is dropped.
    """
    group = {}
    for sample, segs in per_sample.items():
        for seg in segs:
            group[segment_id(seg)] = sample
    result = OrderedDict()
    for sample, segs in per_sample.items():
        scored = []
        for pos, seg in enumerate(segs):
            sid = segment_id(seg)
            if sid not in index.vectors:
                raise KeyError(f"segment {sid!r} is not in the index")
            scored.append((bucket_frequency(index, sid, group.get), pos, seg))
        scored.sort(key=lambda x: (x[0], x[1]))
        kept = []
        kept_ids = set()
        for freq, _, seg in scored:
            if len(kept) >= cap:
                break
            sid = segment_id(seg)
            near = lsh_search(index, index.vectors[sid])
            if kept_ids.intersection(near):
                continue
            kept.append(Selection(seg, len(kept), freq))
            kept_ids.add(sid)
        result[sample] = kept
    return result


# ---------------------------------------------------------------------------
# persistence


def index_bytes(index: LshIndex) -> bytes:
    p = index.params
    parts = [
        LSH_MAGIC,
        struct.pack("<IIdQIB", p.k, p.l, p.r, p.seed, p.dim, METRICS.index(p.metric)),
        np.ascontiguousarray(index.hyperplanes, dtype="<f8").tobytes(),
        struct.pack("<I", len(index.vectors)),
    ]
    order = list(index.vectors)
    for ident in order:
        key = ident.encode("utf-8")
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(np.asarray(index.vectors[ident], dtype="<f8").tobytes())
    pos = {ident: n for n, ident in enumerate(order)}
    for table in index.tables:
        parts.append(struct.pack("<I", len(table)))
        for sig in sorted(table):
            members = table[sig]
            parts.append(struct.pack("<QI", sig, len(members)))
            parts.append(struct.pack(f"<{len(members)}I", *(pos[m] for m in members)))
    return b"".join(parts)


def parse_index(raw: bytes) -> LshIndex:
    if raw[:4] != LSH_MAGIC:
        raise FormatError("not a CLSH index file")
    try:
        k, l_, r, seed, dim, metric = struct.unpack_from("<IIdQIB", raw, 4)
        pos = 4 + struct.calcsize("<IIdQIB")
        params = LshParams(k, l_, r, seed, dim, METRICS[metric])
        n = l_ * k * dim
        planes = np.frombuffer(raw, "<f8", n, pos).reshape(l_, k, dim).astype(float)
        pos += 8 * n
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        index = LshIndex(params, planes, [dict() for _ in range(l_)])
        order = []
        for n_id in range(count):
            (klen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            ident = raw[pos : pos + klen].decode("utf-8")
            pos += klen
            index.vectors[ident] = np.frombuffer(raw, "<f8", dim, pos).astype(float)
            index.positions[ident] = n_id
            pos += 8 * dim
            order.append(ident)
        for table in index.tables:
            (nb,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            for _ in range(nb):
                sig, cnt = struct.unpack_from("<QI", raw, pos)
                pos += 12
                table[sig] = [order[i] for i in struct.unpack_from(f"<{cnt}I", raw, pos)]
                pos += 4 * cnt
    except (struct.error, ValueError, IndexError, UnicodeDecodeError) as exc:
        raise FormatError(f"malformed CLSH file: {exc}") from None
    if pos != len(raw):
        raise FormatError("trailing bytes in CLSH file")
    return index


def write_index(index: LshIndex, path) -> None:
    with open(path, "wb") as fh:
        fh.write(index_bytes(index))


def read_index(path) -> LshIndex:
    with open(path, "rb") as fh:
        return parse_index(fh.read())
