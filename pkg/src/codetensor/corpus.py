"""Synthetic binary corpus and stratified dataset splits.

Each file is a stack of row bands, 256 bytes per row. Every band repeats one
filler texture: a fixed sequence of gray levels, cyclically shifted per row,
with random low bits inside each quantization bin. All 2-row cells of a band
therefore share almost the same GLCM, and neighbouring bands use textures
whose features differ enough to cut between them. A short noisy header and
optional zero padding between bands mimic file structure.

Malware files carry a bright payload motif in every row of every band. The
payload starts at a seeded column but always covers :data:`PAYLOAD_CORE`.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DataError, IoError, SplitError

WIDTH = 256
PAYLOAD_CORE = (96, 128)
PAYLOAD_LEVELS = (14, 16)
# dimmer payload of evasive variants; half of it lies below the brightest filler
VARIANT_LEVELS = (10, 12)
MANIFEST_FIELDS = ("sample_id", "path", "orig_len", "label", "split")
SPLIT_MODES = ("shared", "disjoint")


def _texture_library():
    """Quantized level sequences (16 levels, filler kept below level 8)."""
    rng = np.random.default_rng(20240611)
    lib = [
        np.tile(np.arange(8), WIDTH // 8),  # ramp
        np.tile([1, 6], WIDTH // 2),  # high contrast stripes
        np.where(np.arange(WIDTH) % 4 == 0, 4, 3),  # near constant
        rng.integers(0, 8, WIDTH),  # code-like noise
        rng.integers(2, 4, WIDTH),  # low-contrast noise
        np.repeat(rng.integers(0, 8, WIDTH // 8), 8),  # blocky
        np.tile([0, 0, 7, 7], WIDTH // 4),  # wide stripes
    ]
    return [np.asarray(t, dtype=np.int64) for t in lib]


TEXTURES = _texture_library()


@dataclass(frozen=True)
class ManifestRow:
    sample_id: str
    path: str
    orig_len: int
    label: int
    split: str = ""


@dataclass(frozen=True)
class Manifest:
    rows: tuple

    def __post_init__(self):
        ids = [r.sample_id for r in self.rows]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate sample ids in manifest")
        if any(r.label not in (0, 1) for r in self.rows):
            raise DataError("labels must be 0 or 1")

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def by_split(self, name):
        return [r for r in self.rows if r.split == name]

    def labels(self):
        return np.array([r.label for r in self.rows], dtype=int)


def _band(rng, texture, rows, payload):
    """``rows x 256`` uint8 band of ``texture``; ``payload`` is ``(start, width, levels)``."""
    shifts = rng.integers(0, WIDTH, rows)
    idx = (np.arange(WIDTH)[None, :] + shifts[:, None]) % WIDTH
    levels = texture[idx]
    if payload is not None:
        start, width, pay = payload
        levels[:, start : start + width] = pay[None, :]
    low = rng.integers(0, 16, (rows, WIDTH))
    return (levels * 16 + low).astype(np.uint8)


def synth_bytes(label: int, rng: np.random.Generator, variant: bool = False) -> bytes:
    """One synthetic binary; ``variant`` malware uses a dimmer payload."""
    n_bands = int(rng.integers(2, 5))
    order = [int(rng.integers(len(TEXTURES)))]
    while len(order) < n_bands:
        t = int(rng.integers(len(TEXTURES)))
        if t != order[-1]:
            order.append(t)
    payload = None
    if label == 1:
        start = int(rng.integers(32, PAYLOAD_CORE[0] + 1))
        width = int(rng.integers(PAYLOAD_CORE[1] - start, PAYLOAD_CORE[1] - start + 33))
        lo, hi = VARIANT_LEVELS if variant else PAYLOAD_LEVELS
        payload = (start, width, rng.integers(lo, hi, width))
    parts = [rng.integers(0, 256, (16, WIDTH), dtype=np.uint8)]  # header
    for t in order:
        if rng.random() < 0.3:
            parts.append(np.zeros((4, WIDTH), dtype=np.uint8))  # alignment padding
        rows = 2 * int(rng.integers(32, 81))
        parts.append(_band(rng, TEXTURES[t], rows, payload))
    return np.concatenate(parts).tobytes()


def synth_corpus(n_benign: int, n_malware: int, seed: int, out_dir, variant_rate: float = 0.2) -> Manifest:
    """Write ``n_benign + n_malware`` binaries and ``manifest.csv`` under ``out_dir``.

    A ``variant_rate`` fraction of the malware carries the dimmer payload.
    """
    if n_benign < 1 or n_malware < 1:
        raise DataError("synth_corpus needs at least one sample per class")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {out}: {exc}") from None
    rng = np.random.default_rng(seed)
    labels = [0] * n_benign + [1] * n_malware
    rows = []
    for n, label in enumerate(labels):
        sub = np.random.default_rng([seed, n])
        variant = label == 1 and rng.random() < variant_rate
        data = synth_bytes(label, sub, variant)
        sid = f"{'mal' if label else 'ben'}_{n:05d}"
        path = out / f"{sid}.bin"
        try:
            path.write_bytes(data)
        except OSError as exc:
            raise IoError(f"cannot write {path}: {exc}") from None
        rows.append(ManifestRow(sid, path.name, len(data), label))
    manifest = Manifest(tuple(rows))
    write_manifest(manifest, out / "manifest.csv")
    return manifest


def write_manifest(manifest: Manifest, path) -> None:
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(MANIFEST_FIELDS)
            for r in manifest:
                w.writerow([r.sample_id, r.path, r.orig_len, r.label, r.split])
        os.replace(tmp, path)
    except OSError as exc:
        raise IoError(f"cannot write manifest {path}: {exc}") from None


def read_manifest(path) -> Manifest:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
                raise DataError(f"{path}: unexpected manifest header {reader.fieldnames}")
            rows = [
                ManifestRow(d["sample_id"], d["path"], int(d["orig_len"]), int(d["label"]), d["split"])
                for d in reader
            ]
    except OSError as exc:
        raise IoError(f"cannot read manifest {path}: {exc}") from None
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: malformed manifest row: {exc}") from None
    return Manifest(tuple(rows))


def split_counts(n: int, mode: str) -> dict:
    """Partition sizes for ``n`` samples of one label."""
    if mode == "shared":
        test = round(0.2 * n)
        return {"train": n - test, "test": test}
    if mode == "disjoint":
        test = round(0.2 * n)
        gan = round(0.4 * n)
        return {"gan": gan, "detector": n - gan - test, "test": test}
    raise SplitError(f"unknown split mode {mode!r}; expected one of {SPLIT_MODES}")


def split(manifest: Manifest, mode: str, seed: int) -> Manifest:
    """Stratified split: ``shared`` is 80/20 train/test, ``disjoint`` 40/40/20 gan/detector/test."""
    rng = np.random.default_rng(seed)
    assign = {}
    totals = {}
    for label in (0, 1):
        ids = sorted(r.sample_id for r in manifest if r.label == label)
        counts = split_counts(len(ids), mode)
        perm = [ids[i] for i in rng.permutation(len(ids))]
        pos = 0
        for name, c in counts.items():
            for sid in perm[pos : pos + c]:
                assign[sid] = name
            pos += c
            totals[name] = totals.get(name, 0) + c
    empty = [name for name, c in totals.items() if c == 0]
    if empty or not totals:
        raise SplitError(f"{len(manifest)} samples are too few for a {mode} split (empty: {empty})")
    return Manifest(tuple(replace(r, split=assign[r.sample_id]) for r in manifest))
