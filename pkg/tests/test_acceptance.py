"""Acceptance criteria, one test per criterion.

Each test prints a single PASS/FAIL line (also collected in the terminal
summary) and then asserts the criterion at its stated tolerance.
"""

import math
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from codetensor import corpus, lsh, neural, pipeline
from codetensor.config import PipelineConfig
from codetensor.segmentation import band_features, cut_image, feature_distance, is_degraded
from codetensor.tensor import (
    dft_mode3,
    fold,
    identity_tensor,
    matvec,
    rank_r_approx,
    singular_tubes,
    t_product,
    t_product_spatial,
    t_svd,
    t_transpose,
)

from test_neural import DISCRIMINATOR_TABLE, GENERATOR_TABLE, LAYER_CASES, single


def rel(x, y):
    return float(np.linalg.norm(x - y) / max(np.linalg.norm(y), 1e-300))


# ---------------------------------------------------------------- tensor algebra


def test_tensor_algebra_suite(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = dict(svd=0.0, dual=0.0, orth=0.0, parseval=0.0)
    fold_exact = monotone = beats = True
    for _ in range(200):
        i1, i2, i3 = (int(v) for v in rng.integers(1, [17, 17, 9]))
        a = rng.standard_normal((i1, i2, i3))
        b = rng.standard_normal((i2, int(rng.integers(1, 17)), i3))
        u, s, v = t_svd(a)
        worst["svd"] = max(worst["svd"], rel(t_product(t_product(u, s), t_transpose(v)), a))
        ref = t_product_spatial(a, b)
        worst["dual"] = max(worst["dual"], rel(t_product(a, b), ref))
        fold_exact &= bool(np.array_equal(fold(matvec(a), i3), a))
        for q in (u, v):
            gram = t_product(t_transpose(q), q)
            worst["orth"] = max(worst["orth"], float(np.linalg.norm(gram - identity_tensor(q.shape[0], i3))))
        energy = float(np.sum(a**2))
        worst["parseval"] = max(worst["parseval"], abs(energy - np.sum(singular_tubes(a) ** 2) / i3) / energy)
        full = min(i1, i2)
        errs = [float(np.linalg.norm(a - rank_r_approx(a, r))) for r in range(1, full + 1)]
        monotone &= all(y <= x + 1e-12 for x, y in zip(errs, errs[1:]))
        r = int(rng.integers(1, full + 1))
        for _ in range(50):
            x = rng.standard_normal((i1, r, i3))
            y = rng.standard_normal((r, i2, i3))
            beats &= errs[r - 1] <= float(np.linalg.norm(a - t_product(x, y))) + 1e-12
    elapsed = time.perf_counter() - t0
    ok = (worst["svd"] < 1e-10 and worst["dual"] < 1e-10 and fold_exact and worst["orth"] < 1e-9
          and worst["parseval"] < 1e-9 and monotone and beats and elapsed < 30)
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    criterion("tensor algebra suite", ok,
              f"{detail}, fold exact {fold_exact}, rank monotone {monotone}, "
              f"beats random {beats}, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- neural kernel


def test_neural_kernel(criterion):
    t0 = time.perf_counter()
    worst = 0.0
    for _, make, shape in LAYER_CASES:
        for train in (True, False):
            net = single(make(), shape, seed=1)
            x = np.random.default_rng(2).uniform(-0.5, 1.5, (3,) + shape)
            worst = max(worst, max(v for v in neural.gradcheck(net, x, samples=12, train=train).values()
                                   if not math.isnan(v)))
    nets = {}
    for build in (neural.build_discriminator, neural.build_generator):
        net = build("desk", seed=4)
        x = np.random.default_rng(5).uniform(0, 1, (2, 64, 64, 1))
        report = neural.gradcheck(net, x, samples=4, eps=1e-5)
        nets[net.name] = max(v for v in report.values() if not math.isnan(v))
    tables = (neural.build_discriminator("paper").shape_table() == DISCRIMINATOR_TABLE
              and neural.build_generator("paper").shape_table() == GENERATOR_TABLE)
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-3 and max(nets.values()) < 1e-3 and tables and elapsed < 60
    criterion("neural kernel", ok,
              f"worst layer rel err {worst:.1e}, "
              + ", ".join(f"{k} {v:.1e}" for k, v in nets.items())
              + f", layer tables match {tables}, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- segmentation


def planted_fixtures():
    """Stacks of 2-4 synthetic texture bands, with the planted boundaries."""
    rng = np.random.default_rng(77)
    out = []
    n_tex = len(corpus.TEXTURES)
    for i in range(n_tex):
        for j in range(n_tex):
            if i != j:
                out.append(([i, j], [64, 64]))
    for _ in range(20):
        k = int(rng.integers(3, 5))
        order = [int(rng.integers(n_tex))]
        while len(order) < k:
            t = int(rng.integers(n_tex))
            if t != order[-1]:
                order.append(t)
        out.append((order, [2 * int(rng.integers(32, 64)) for _ in order]))
    images = []
    for n, (order, heights) in enumerate(out):
        r = np.random.default_rng(n)
        px = np.vstack([corpus._band(r, corpus.TEXTURES[t], h, None) for t, h in zip(order, heights)])
        bounds = list(np.cumsum([0] + heights))
        images.append((px, list(zip(bounds[:-1], bounds[1:]))))
    return images


def conditions_hold(px, segs, threshold=0.05):
    prev = 0
    for s in segs:
        if s.row_start % 2 or s.row_end % 2 or s.row_start < prev or s.height < 2:
            return False
        cells = [band_features(px[c : c + 2]) for c in range(s.row_start, s.row_end, 2)]
        if any(feature_distance(a, b) >= threshold for a, b in zip(cells, cells[1:])):
            return False
        prev = s.row_end
    for a, b in zip(segs, segs[1:]):
        if a.row_end == b.row_start:
            d = feature_distance(band_features(px[a.row_end - 2 : a.row_end]),
                                 band_features(px[b.row_start : b.row_start + 2]))
            if d < threshold:
                return False
        elif not all(is_degraded(px[c : c + 2]) for c in range(a.row_end, b.row_start, 2)):
            return False
    return True


def test_segmentation(criterion):
    t0 = time.perf_counter()
    fixtures = planted_fixtures()
    exact = conds = 0
    for px, planted in fixtures:
        segs = cut_image(px)
        exact += [(s.row_start, s.row_end) for s in segs] == planted
        conds += conditions_hold(px, segs)
    constant = all(cut_image(np.full((128, 256), v, np.uint8)) == [] for v in (0, 7, 128, 255))
    elapsed = time.perf_counter() - t0
    n = len(fixtures)
    ok = exact == n and conds == n and constant and elapsed < 5
    criterion("segmentation", ok,
              f"{exact}/{n} fixtures cut as planted, conditions hold on {conds}/{n}, "
              f"constant images empty {constant}, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- LSH


def pair_at_angle(rng, dim, theta):
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    u = rng.standard_normal(dim)
    u -= (u @ v) * v
    u /= np.linalg.norm(u)
    return v, math.cos(theta) * v + math.sin(theta) * u


def test_lsh(criterion):
    t0 = time.perf_counter()
    params = lsh.LshParams()

    # recall of planted near-duplicates against the linear-scan oracle
    hits = 0
    for trial in range(100):
        rng = np.random.default_rng(trial)
        vecs = rng.random((100, params.dim))
        step = rng.standard_normal(params.dim)
        q = vecs[0] + (params.r / 5) * step / np.linalg.norm(step)
        idx = lsh.build_index([(f"s{i:03d}", v) for i, v in enumerate(vecs)], lsh.LshParams(seed=trial))
        assert "s000" in lsh.linear_scan(idx, q)
        hits += "s000" in lsh.lsh_search(idx, q)
    recall = hits / 100

    # single-bit collision rate against cosine similarity, 10k pairs
    rng = np.random.default_rng(1)
    planes = lsh.random_hyperplanes(params).reshape(-1, params.dim)
    cos, rate = [], []
    for _ in range(10_000):
        v, w = pair_at_angle(rng, params.dim, rng.uniform(0, math.pi))
        cos.append(v @ w)
        rate.append(np.mean((planes @ v >= 0) == (planes @ w >= 0)))
    bins = np.digitize(cos, np.linspace(-1, 1, 11)[1:-1])
    per_bin = [float(np.mean(np.array(rate)[bins == b])) for b in range(10)]
    monotone = all(y >= x - 0.02 for x, y in zip(per_bin, per_bin[1:]))

    # per-table collision rate against (1 - theta/pi)^k
    rng = np.random.default_rng(2)
    deviations = {}
    for theta in (math.pi / 16, math.pi / 8, math.pi / 4):
        expect = (1 - theta / math.pi) ** params.k
        agree = []
        for trial in range(1000):
            planes = lsh.random_hyperplanes(lsh.LshParams(seed=10_000 + trial))
            v, w = pair_at_angle(rng, params.dim, theta)
            agree.extend(a == b for a, b in zip(lsh.signatures(planes, v), lsh.signatures(planes, w)))
        deviations[round(theta, 3)] = abs(float(np.mean(agree)) - expect)
    within = all(d <= 0.03 for d in deviations.values())
    elapsed = time.perf_counter() - t0
    ok = recall >= 0.99 and monotone and within and elapsed < 30
    criterion("LSH", ok,
              f"recall {recall:.2f}, monotone {monotone}, max |rate - analytic| "
              f"{max(deviations.values()):.3f}, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- end to end

E2E = {
    "corpus.n_benign": 100,
    "corpus.n_malware": 100,
    "detector.kinds": "DT,LR",
    "split.modes": "shared",
    "gan.profile": "desk",
    "gan.seeds": 5,
    "gan.checkpoint_every": 20,
}


def e2e_cfg(root):
    return PipelineConfig({**E2E, "paths.corpus": str(root / "corpus"), "paths.work": str(root / "work")})


@pytest.fixture(scope="module")
def e2e_runs(tmp_path_factory):
    roots = [tmp_path_factory.mktemp("e2e_a"), tmp_path_factory.mktemp("e2e_b")]
    times = []
    for root in roots:
        t0 = time.process_time()
        pipeline.run_pipeline(e2e_cfg(root), synth=True)
        times.append(time.process_time() - t0)
    yield roots, times
    for root in roots:
        shutil.rmtree(root, ignore_errors=True)


def test_end_to_end_directional(e2e_runs, criterion):
    (root, _), (cpu, _) = e2e_runs
    seeds = pipeline.read_report(root / "work" / "report_seeds.csv")
    medians = pipeline.read_report(root / "work" / "report.csv")
    lines = []
    ok_all = cpu < 600
    for kind in ("DT", "LR"):
        rows = [r for r in seeds if r["detector"] == kind]
        before = min(min(float(r["original_bbda_train"]), float(r["original_bbda_test"])) for r in rows)
        after = max(float(r["trained_bbda_train"]) for r in rows)
        change = float(next(r for r in medians if r["detector"] == kind)["signed_change"])
        ok_a, ok_b, ok_c = before >= 0.90, after <= 0.30, change >= 0
        ok_all &= ok_a and ok_b and ok_c
        lines.append(f"{kind}: (a) min BBDA {before:.3f} {'ok' if ok_a else 'FAIL'}, "
                     f"(b) max generated BBDA {after:.3f} {'ok' if ok_b else 'FAIL'}, "
                     f"(c) median signed change {change:+.3f} {'ok' if ok_c else 'FAIL'}")
    criterion("end-to-end directional reproduction", ok_all, "; ".join(lines) + f"; {cpu:.0f}s CPU")
    assert ok_all


def test_determinism(e2e_runs, criterion):
    (a, b), _ = e2e_runs

    def files(root):
        work = root / "work"
        keep = [p for p in sorted(work.rglob("*")) if p.is_file() and (p.suffix == ".cmdl" or p.name.startswith("report"))]
        return {str(p.relative_to(work)): p.read_bytes() for p in keep}

    fa, fb = files(a), files(b)
    n_ckpt = sum(k.endswith(".cmdl") and "gan_step" in k for k in fa)
    same = fa.keys() == fb.keys() and all(fa[k] == fb[k] for k in fa)
    ok = same and n_ckpt > 0 and "report.csv" in fa
    criterion("determinism", ok, f"{len(fa)} report/checkpoint files compared, {n_ckpt} periodic checkpoints, identical {same}")
    assert ok
