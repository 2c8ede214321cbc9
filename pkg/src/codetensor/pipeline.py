"""Stage-by-stage pipeline over a work directory.

Every stage reads its inputs from files written by earlier stages, so any
stage can be re-run on its own. Layout under the work directory::

    images/<sample>.pgm        images.csv
    segments/<sha>_<r0>_<r1>.pgm   segments.csv
    lsh.clsh                   selection.csv
    features/<sample>.cten     features.csv
    splits/<mode>.csv
    models/<mode>/<kind>.cmdl
    gan/<mode>/<kind>/seed<k>/generator.cmdl, history.csv
    report.csv                 report_seeds.csv
    pipeline.log

Only the log carries timestamps.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import os
import shutil
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import detectors, gan, lsh, segmentation, tensor
from .config import PipelineConfig
from .containers import read_tensor, write_tensor
from .encoding import encode_file, pgm_bytes, read_pgm, write_pgm
from .errors import CodeTensorError, DataError, IoError, NoSamples, NoSegments, StageError

log = logging.getLogger("codetensor")

STAGES = ("encode", "cut", "select", "compress", "train-detector", "train-gan", "evaluate")
REPORT_FIELDS = (
    "detector",
    "split_mode",
    "original_bbda_train",
    "trained_bbda_train",
    "original_bbda_test",
    "trained_bbda_test",
    "black_bone_acc",
    "mtfd_acc",
    "impr_ratio",
    "signed_change",
)
SEED_FIELDS = ("seed",) + REPORT_FIELDS
SEGMENT_FIELDS = ("sample_id", "file", "row_start", "row_end", "entropy", "contrast", "homogeneity", "asm")
# partition names per split mode: (gan pool, detector pool, test)
POOLS = {"shared": ("train", "train", "test"), "disjoint": ("gan", "detector", "test")}


@contextmanager
def stage(name, sample=None):
    """Re-raise package and OS errors as :class:`StageError` with context."""
    try:
        yield
    except StageError:
        raise
    except CodeTensorError as exc:
        raise StageError(name, sample, exc) from exc
    except OSError as exc:
        raise StageError(name, sample, IoError(str(exc))) from exc


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def write_csv(path, fields, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([_fmt(r[f]) if isinstance(r, dict) else _fmt(v) for f, v in zip(fields, _vals(r, fields))])
    os.replace(tmp, path)


def _vals(r, fields):
    return [r[f] for f in fields] if isinstance(r, dict) else list(r)


def read_csv(path):
    try:
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))
    except FileNotFoundError:
        raise DataError(f"missing artifact {path}; run the earlier stages first") from None


def _seeds(cfg):
    return [cfg["gan.seed"] + i for i in range(max(1, cfg["gan.seeds"]))]


def _work(cfg) -> Path:
    return Path(cfg["paths.work"])


# ---------------------------------------------------------------------------
# preprocessing stages


def stage_encode(cfg: PipelineConfig):
    """B2M-encode every manifest entry to ``images/<sample>.pgm``."""
    src = Path(cfg["paths.corpus"])
    work = _work(cfg)
    with stage("encode"):
        manifest = corpus_mod.read_manifest(src / "manifest.csv")
        (work / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for r in sorted(manifest, key=lambda r: r.sample_id):
        with stage("encode", r.sample_id):
            img, n = encode_file(src / r.path)
            if n != r.orig_len:
                raise DataError(f"length {n} differs from manifest ({r.orig_len})")
            write_pgm(img, work / "images" / f"{r.sample_id}.pgm")
        rows.append((r.sample_id, r.label, n, f"images/{r.sample_id}.pgm"))
    write_csv(work / "images.csv", ("sample_id", "label", "orig_len", "pgm"), rows)
    corpus_mod.write_manifest(manifest, work / "manifest.csv")
    log.info("encode: %d images", len(rows))
    return rows


def stage_cut(cfg: PipelineConfig):
    """Cut every image into texture segments; keep those tall enough."""
    work = _work(cfg)
    seg_dir = work / "segments"
    with stage("cut"):
        images = read_csv(work / "images.csv")
        if seg_dir.exists():
            shutil.rmtree(seg_dir)
        seg_dir.mkdir(parents=True)
    rows = []
    for r in images:
        sid = r["sample_id"]
        with stage("cut", sid):
            img = read_pgm(work / r["pgm"])
            segs = segmentation.cut_image(
                img,
                cfg["cut.threshold"],
                levels=cfg["glcm.levels"],
                offset=(cfg["glcm.dx"], cfg["glcm.dy"]),
                eps=cfg["cut.eps"],
                source=sid,
            )
            valid = segmentation.filter_valid(segs, cfg["cut.min_rows"])
            if not valid:
                raise NoSegments(f"no segment of at least {cfg['cut.min_rows']} rows")
            prefix = hashlib.sha256(pgm_bytes(img)).hexdigest()[:12]
            for s in valid:
                name = f"{prefix}_{s.row_start}_{s.row_end}.pgm"
                write_pgm(type(img)(s.pixels), seg_dir / name)
                f = s.features
                rows.append((sid, f"segments/{name}", s.row_start, s.row_end,
                             f.entropy, f.contrast, f.homogeneity, f.asm))
    write_csv(work / "segments.csv", SEGMENT_FIELDS, rows)
    log.info("cut: %d valid segments", len(rows))
    return rows


def load_segments(work) -> "dict[str, list]":
    """Texture segments per sample, rebuilt from ``segments.csv`` and the PGMs."""
    work = Path(work)
    per = {}
    for r in read_csv(work / "segments.csv"):
        with stage("select", r["sample_id"]):
            px = read_pgm(work / r["file"]).pixels
            feats = segmentation.GlcmFeatures(*(float(r[k]) for k in SEGMENT_FIELDS[4:]))
            seg = segmentation.TextureSegment(r["sample_id"], int(r["row_start"]), int(r["row_end"]), px, feats)
            seg.file = r["file"]
        per.setdefault(r["sample_id"], []).append(seg)
    return per


def lsh_params(cfg) -> lsh.LshParams:
    return lsh.LshParams(cfg["lsh.k"], cfg["lsh.l"], cfg["lsh.r"], cfg["lsh.seed"], metric=cfg["lsh.metric"])


def stage_select(cfg: PipelineConfig):
    """Index every segment and keep the most distinctive ones per sample."""
    work = _work(cfg)
    per = load_segments(work)
    with stage("select"):
        index = lsh.build_index([s for segs in per.values() for s in segs], lsh_params(cfg))
        lsh.write_index(index, work / "lsh.clsh")
        chosen = lsh.select_significant(per, index, cfg["select.cap"])
    rows = [(sid, sel.segment.file, sel.rank, sel.bucket_frequency)
            for sid, sels in chosen.items() for sel in sels]
    write_csv(work / "selection.csv", ("sample_id", "file", "rank", "bucket_frequency"), rows)
    log.info("select: %d segments kept", len(rows))
    return rows


def stage_compress(cfg: PipelineConfig):
    """Compress each sample's selected segments to a rank-r tensor of 64x64 slices."""
    work = _work(cfg)
    feat_dir = work / "features"
    with stage("compress"):
        labels = {r["sample_id"]: int(r["label"]) for r in read_csv(work / "images.csv")}
        chosen = {}
        for r in read_csv(work / "selection.csv"):
            chosen.setdefault(r["sample_id"], []).append(r["file"])
        feat_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for sid in sorted(labels):
        with stage("compress", sid):
            if sid not in chosen:
                raise NoSegments("no selected segments")
            bands = [read_pgm(work / f).pixels for f in chosen[sid]]
            mats = tensor.compress_sample(bands, cfg["tsvd.rank"])
            write_tensor(np.stack(mats, axis=2), feat_dir / f"{sid}.cten")
        rows.append((sid, labels[sid], f"features/{sid}.cten", len(mats)))
    write_csv(work / "features.csv", ("sample_id", "label", "file", "n_slices"), rows)
    log.info("compress: %d feature tensors", len(rows))
    return rows


# ---------------------------------------------------------------------------
# learning stages


def load_features(work):
    """``{sample_id: (label, [64x64 matrices])}`` in sample order."""
    work = Path(work)
    out = {}
    for r in read_csv(work / "features.csv"):
        with stage("load-features", r["sample_id"]):
            t = read_tensor(work / r["file"])
        out[r["sample_id"]] = (int(r["label"]), [t[:, :, k] for k in range(t.shape[2])])
    return out


def split_for(cfg, mode):
    """Stratified split of the work manifest; written to ``splits/<mode>.csv``."""
    work = _work(cfg)
    with stage("split"):
        manifest = corpus_mod.read_manifest(work / "manifest.csv")
        parted = corpus_mod.split(manifest, mode, cfg["split.seed"])
        (work / "splits").mkdir(parents=True, exist_ok=True)
        corpus_mod.write_manifest(parted, work / "splits" / f"{mode}.csv")
    return {r.sample_id: r.split for r in parted}


def matrices(features, assignment, part, label=None):
    X, y = [], []
    for sid, (lab, mats) in features.items():
        if assignment.get(sid) == part and (label is None or lab == label):
            X.extend(mats)
            y.extend([lab] * len(mats))
    if not X:
        return np.zeros((0, 64, 64)), np.zeros(0, dtype=int)
    return np.stack(X), np.array(y, dtype=int)


def detector_hyper(cfg, kind):
    hyper = {}
    if kind in ("LR", "NB", "DT"):
        hyper["pool"] = cfg["detector.pool"]
    if kind == "DT":
        hyper["max_depth"] = cfg["detector.max_depth"]
    if kind == "LR":
        hyper["lr"] = cfg["detector.lr"]
        hyper["epochs"] = cfg["detector.epochs"]
    return hyper


def _model_path(work, mode, kind):
    return Path(work) / "models" / mode / f"{kind}.cmdl"


def _gan_dir(work, mode, kind, seed):
    return Path(work) / "gan" / mode / kind / f"seed{seed}"


def stage_train_detector(cfg: PipelineConfig):
    """Fit every requested Black-Bone detector on its split's detector pool."""
    work = _work(cfg)
    features = load_features(work)
    for mode in cfg.list("split.modes"):
        assignment = split_for(cfg, mode)
        X, y = matrices(features, assignment, POOLS[mode][1])
        for kind in cfg.list("detector.kinds"):
            with stage("train-detector", f"{mode}/{kind}"):
                model = detectors.make_detector(kind, seed=cfg["detector.seed"], **detector_hyper(cfg, kind))
                model.fit(X, y)
                path = _model_path(work, mode, kind)
                path.parent.mkdir(parents=True, exist_ok=True)
                detectors.save_detector(model, path)
            log.info("train-detector: %s/%s on %d matrices", mode, kind, len(y))


def gan_config(cfg, seed) -> gan.GanConfig:
    try:
        return gan.GanConfig(
            epochs=cfg["gan.epochs"], m=cfg["gan.m"], lr_d=cfg["gan.lr_d"], lr_g=cfg["gan.lr_g"],
            lam=cfg["gan.lambda"], feature_layer=cfg["gan.layer"], seed=seed, profile=cfg["gan.profile"],
            factor=cfg["gan.factor"], jitter=cfg["gan.jitter"], checkpoint_every=cfg["gan.checkpoint_every"],
        )
    except ValueError as exc:
        from .errors import ConfigError

        raise ConfigError(str(exc)) from None


def stage_train_gan(cfg: PipelineConfig):
    """Adversarial training per split mode, detector kind and seed."""
    work = _work(cfg)
    features = load_features(work)
    for mode in cfg.list("split.modes"):
        assignment = split_for(cfg, mode)
        pool = POOLS[mode][0]
        mal, _ = matrices(features, assignment, pool, 1)
        ben, _ = matrices(features, assignment, pool, 0)
        for kind in cfg.list("detector.kinds"):
            with stage("train-gan", f"{mode}/{kind}"):
                black_bone = detectors.load_detector(_model_path(work, mode, kind))
            for seed in _seeds(cfg):
                out = _gan_dir(work, mode, kind, seed)
                with stage("train-gan", f"{mode}/{kind}/seed{seed}"):
                    out.mkdir(parents=True, exist_ok=True)
                    state, rep = gan.train(gan_config(cfg, seed), mal, ben, black_bone, checkpoint_dir=out)
                    gan.save_checkpoint(state, out / "generator.cmdl")
                    write_csv(out / "history.csv", gan.HISTORY_FIELDS, state.history)
                log.info("train-gan: %s/%s seed %d: bbda %.3f -> %.3f", mode, kind, seed,
                         rep.bbda_original, rep.bbda_trained)


def evaluate_one(cfg, features, assignment, mode, kind, seed):
    """One report row for a trained generator."""
    work = _work(cfg)
    gan_pool, det_pool, test = POOLS[mode]
    black_bone = detectors.load_detector(_model_path(work, mode, kind))
    state = gan.load_checkpoint(_gan_dir(work, mode, kind, seed) / "generator.cmdl")
    mal_train, _ = matrices(features, assignment, gan_pool, 1)
    mal_test, _ = matrices(features, assignment, test, 1)
    det_mal, _ = matrices(features, assignment, det_pool, 1)
    det_ben, _ = matrices(features, assignment, det_pool, 0)
    if len(mal_train) == 0 or len(mal_test) == 0:
        raise NoSamples(f"{mode} split has no malware in the {gan_pool} or {test} partition")
    rep = gan.retrain_and_improve(
        state, black_bone, kind, det_mal, det_ben, mal_test,
        hyper=detector_hyper(cfg, kind), seed=cfg["detector.seed"], gen_from=mal_train,
    )
    return {
        "seed": seed,
        "detector": kind,
        "split_mode": mode,
        "original_bbda_train": detectors.bbda(black_bone, mal_train),
        "trained_bbda_train": detectors.bbda(black_bone, gan.generate(state, mal_train)),
        "original_bbda_test": detectors.bbda(black_bone, mal_test),
        "trained_bbda_test": detectors.bbda(black_bone, gan.generate(state, mal_test)),
        "black_bone_acc": rep.bbda_original,
        "mtfd_acc": rep.bbda_trained,
        "impr_ratio": rep.improvement,
        "signed_change": rep.signed_change,
    }


def stage_evaluate(cfg: PipelineConfig):
    """Write ``report_seeds.csv`` (one row per seed) and ``report.csv`` (seed medians)."""
    work = _work(cfg)
    features = load_features(work)
    per_seed, report = [], []
    for mode in cfg.list("split.modes"):
        assignment = split_for(cfg, mode)
        for kind in cfg.list("detector.kinds"):
            rows = []
            for seed in _seeds(cfg):
                with stage("evaluate", f"{mode}/{kind}/seed{seed}"):
                    rows.append(evaluate_one(cfg, features, assignment, mode, kind, seed))
            per_seed.extend(rows)
            agg = {"detector": kind, "split_mode": mode}
            for f in REPORT_FIELDS[2:]:
                agg[f] = float(np.median([r[f] for r in rows]))
            report.append(agg)
    write_csv(work / "report_seeds.csv", SEED_FIELDS, per_seed)
    write_csv(work / "report.csv", REPORT_FIELDS, report)
    log.info("evaluate: %d report rows", len(report))
    return report


STAGE_FUNCS = {
    "encode": stage_encode,
    "cut": stage_cut,
    "select": stage_select,
    "compress": stage_compress,
    "train-detector": stage_train_detector,
    "train-gan": stage_train_gan,
    "evaluate": stage_evaluate,
}


def _attach_log(work):
    Path(work).mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(Path(work) / "pipeline.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    return handler


def run_stage(cfg: PipelineConfig, name: str):
    handler = _attach_log(_work(cfg))
    try:
        return STAGE_FUNCS[name](cfg)
    finally:
        log.removeHandler(handler)
        handler.close()


def run_pipeline(cfg: PipelineConfig, synth: bool = False):
    """Run every stage in order; returns the report rows.

    With ``synth`` a synthetic corpus is first written to ``paths.corpus``.
    """
    if synth:
        with stage("synth"):
            corpus_mod.synth_corpus(cfg["corpus.n_benign"], cfg["corpus.n_malware"], cfg["corpus.seed"],
                                    cfg["paths.corpus"], cfg["corpus.variant_rate"])
    result = None
    for name in STAGES:
        result = run_stage(cfg, name)
    return result


def read_report(path):
    return read_csv(path)
