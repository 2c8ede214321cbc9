"""Black-Bone malware detectors behind one interface, and the BBDA metric.

Four families are implemented: logistic regression (``LR``), Gaussian naive
Bayes (``NB``), a CART tree with Gini impurity (``DT``) and a small dense
network (``MLP``). ``LR``, ``NB`` and ``DT`` see each 64x64 matrix mean-pooled
by ``pool`` (4 -> 16x16 = 256 features); the MLP sees all 4096 values.

Other detector families plug in through :func:`register_detector`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import neural
from .containers import read_model, write_model
from .errors import DegenerateLabels, NoSamples, NotFitted, ShapeError

THRESHOLD = 0.5  # probability >= THRESHOLD is called malware
PLUGIN_KINDS = ("SVM", "RF", "AdaBoost", "GBDT", "Attention")


@dataclass
class FeatureSample:
    matrix: np.ndarray
    label: int
    sample_id: str = ""
    source: str = ""

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float)
        if self.matrix.shape != (64, 64):
            raise ShapeError(f"feature matrix must be 64x64, got {self.matrix.shape}")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


def as_arrays(samples):
    """``(X, y)`` from FeatureSamples, or pass an ``(X, y)`` tuple through."""
    if isinstance(samples, tuple):
        X, y = samples
        return np.asarray(X, dtype=float), np.asarray(y, dtype=int)
    samples = list(samples)
    if not samples:
        return np.zeros((0, 64, 64)), np.zeros(0, dtype=int)
    return np.stack([s.matrix for s in samples]), np.array([s.label for s in samples])


def reduce_features(X, pool=4):
    """Mean-pool ``(n, 64, 64)`` matrices by ``pool`` and flatten; 2-D input passes through."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 2:
        return X
    n, h, w = X.shape
    if h % pool or w % pool:
        raise ShapeError(f"{h}x{w} not divisible by pool {pool}")
    return X.reshape(n, h // pool, pool, w // pool, pool).mean(axis=(2, 4)).reshape(n, -1)


class Detector:
    kind = "?"
    defaults: dict = {}

    def __init__(self, seed=0, **hyper):
        unknown = set(hyper) - set(self.defaults)
        if unknown:
            raise ValueError(f"{self.kind}: unknown hyperparameters {sorted(unknown)}")
        self.hyper = {**self.defaults, **hyper}
        self.seed = int(seed)
        self.fitted = False

    def features(self, X):
        return reduce_features(X, self.hyper.get("pool", 4))

    def fit(self, X, y):
        y = np.asarray(y, dtype=int)
        if len(y) == 0:
            raise NoSamples("empty training set")
        if len(np.unique(y)) < 2:
            raise DegenerateLabels("training set needs both benign and malware samples")
        self._fit(self.features(X), y)
        self.fitted = True
        return self

    def predict_proba(self, X):
        if not self.fitted:
            raise NotFitted(f"{self.kind} detector used before fit")
        X = np.asarray(X, dtype=float)
        single = X.ndim == 2 and X.shape == (64, 64)
        if single:
            X = X[None]
        p = np.clip(self._proba(self.features(X)), 0.0, 1.0)
        return float(p[0]) if single else p

    def predict(self, X):
        return (np.asarray(self.predict_proba(X)) >= THRESHOLD).astype(int)

    # persistence: subclasses list their parameter arrays
    def blobs(self):
        raise NotImplementedError

    def load_blobs(self, blobs):
        raise NotImplementedError


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class LogisticRegression(Detector):
    """Full-batch gradient descent on the mean cross-entropy.

    ``lr`` is an upper bound: the step never exceeds ``1 / L``, where ``L``
    bounds the curvature of the loss, so every epoch lowers it.
    """

    kind = "LR"
    defaults = {"pool": 4, "lr": 1.0, "epochs": 300, "l2": 0.0}

    def _fit(self, F, y):
        n, d = F.shape
        self.w = np.zeros(d)
        self.b = 0.0
        self.losses = []
        l2 = self.hyper["l2"]
        A = np.hstack([F, np.ones((n, 1))])
        smooth = 0.25 * np.linalg.norm(A, 2) ** 2 / n + l2
        lr = min(float(self.hyper["lr"]), 1.0 / smooth)
        self.step = lr
        for _ in range(int(self.hyper["epochs"])):
            p = _sigmoid(F @ self.w + self.b)
            self.losses.append(_bce(p, y) + 0.5 * l2 * float(self.w @ self.w))
            g = p - y
            self.w -= lr * (F.T @ g / n + l2 * self.w)
            self.b -= lr * float(g.mean())
        self.losses.append(_bce(_sigmoid(F @ self.w + self.b), y) + 0.5 * l2 * float(self.w @ self.w))

    def score(self, X):
        return self.features(X) @ self.w + self.b

    def _proba(self, F):
        return _sigmoid(F @ self.w + self.b)

    def blobs(self):
        return {"w": self.w, "b": np.array([self.b])}

    def load_blobs(self, blobs):
        self.w, self.b = blobs["w"].copy(), float(blobs["b"][0])


def _bce(p, y, eps=1e-12):
    p = np.clip(p, eps, 1 - eps)
    return float(-(y * np.log(p) + (1 - y) * np.log(1 - p)).mean())


class GaussianNB(Detector):
    """Per-feature Gaussian likelihoods; variances floored at ``smoothing`` x the largest variance."""

    kind = "NB"
    defaults = {"pool": 4, "smoothing": 1e-9}

    def _fit(self, F, y):
        self.classes = np.array([0, 1])
        self.prior = np.array([np.mean(y == c) for c in self.classes])
        self.mean = np.stack([F[y == c].mean(axis=0) for c in self.classes])
        var = np.stack([F[y == c].var(axis=0) for c in self.classes])
        floor = self.hyper["smoothing"] * max(float(F.var(axis=0).max()), 1e-12)
        self.var = var + floor

    def _proba(self, F):
        ll = -0.5 * (
            np.log(2 * np.pi * self.var)[None] + (F[:, None, :] - self.mean[None]) ** 2 / self.var[None]
        ).sum(axis=2)
        ll += np.log(self.prior)[None]
        return _sigmoid(ll[:, 1] - ll[:, 0])

    def blobs(self):
        return {"prior": self.prior, "mean": self.mean, "var": self.var}

    def load_blobs(self, blobs):
        self.classes = np.array([0, 1])
        self.prior, self.mean, self.var = (blobs[k].copy() for k in ("prior", "mean", "var"))


class DecisionTree(Detector):
    """CART: binary splits minimizing weighted Gini impurity; leaves hold the malware fraction.

    Thresholds sit halfway between consecutive distinct feature values.
    """

    kind = "DT"
    defaults = {"pool": 4, "max_depth": 6, "min_samples_leaf": 1}

    def _fit(self, F, y):
        self.feature, self.threshold, self.left, self.right, self.value = [], [], [], [], []
        self._grow(F, y.astype(float), 0)
        for name in ("feature", "threshold", "left", "right", "value"):
            setattr(self, name, np.array(getattr(self, name), dtype=float))

    def _new(self, value):
        for name, v in zip(("feature", "threshold", "left", "right", "value"), (-1, 0.0, -1, -1, value)):
            getattr(self, name).append(v)
        return len(self.value) - 1

    def _grow(self, F, y, depth):
        node = self._new(float(y.mean()))
        if depth >= self.hyper["max_depth"] or y.min() == y.max():
            return node
        split = best_split(F, y, int(self.hyper["min_samples_leaf"]))
        if split is None:
            return node
        feat, thr = split
        mask = F[:, feat] <= thr
        self.feature[node], self.threshold[node] = feat, thr
        self.left[node] = self._grow(F[mask], y[mask], depth + 1)
        self.right[node] = self._grow(F[~mask], y[~mask], depth + 1)
        return node

    def _proba(self, F):
        out = np.empty(len(F))
        for i, row in enumerate(F):
            node = 0
            while self.feature[node] >= 0:
                f = int(self.feature[node])
                node = int(self.left[node] if row[f] <= self.threshold[node] else self.right[node])
            out[i] = self.value[node]
        return out

    def depth(self):
        def walk(node):
            if self.feature[node] < 0:
                return 0
            return 1 + max(walk(int(self.left[node])), walk(int(self.right[node])))

        return walk(0)

    def blobs(self):
        return {k: getattr(self, k) for k in ("feature", "threshold", "left", "right", "value")}

    def load_blobs(self, blobs):
        for k, v in blobs.items():
            setattr(self, k, v.copy())


def gini(y):
    if len(y) == 0:
        return 0.0
    p = float(np.mean(y))
    return 2.0 * p * (1.0 - p)


def best_split(F, y, min_leaf=1):
    """Lowest weighted-Gini ``(feature, threshold)`` over all features, or ``None``.

    Ties go to the lowest feature index, then the lowest threshold.
    """
    n, d = F.shape
    order = np.argsort(F, axis=0, kind="stable")
    Fs = np.take_along_axis(F, order, axis=0)
    ys = y[order]
    left_n = np.arange(1, n)[:, None]
    left_pos = np.cumsum(ys, axis=0)[:-1]
    total_pos = ys.sum(axis=0)
    right_n = n - left_n
    right_pos = total_pos - left_pos
    pl = left_pos / left_n
    pr = right_pos / right_n
    impurity = (left_n * 2 * pl * (1 - pl) + right_n * 2 * pr * (1 - pr)) / n
    valid = (Fs[1:] > Fs[:-1]) & (left_n >= min_leaf) & (right_n >= min_leaf)
    if not valid.any():
        return None
    impurity = np.where(valid, impurity, np.inf)
    best = impurity.min()
    if not best < gini(y) - 1e-12:
        return None
    # column-major scan so ties resolve to the lowest feature index
    cand = np.argwhere((impurity.T <= best + 1e-12))
    feat, pos = int(cand[0][0]), int(cand[0][1])
    return feat, float(0.5 * (Fs[pos, feat] + Fs[pos + 1, feat]))


class MLPDetector(Detector):
    """Dense ReLU network on the full 4096-value matrix, minibatch SGD on cross-entropy."""

    kind = "MLP"
    defaults = {"hidden": 64, "lr": 0.05, "epochs": 60, "batch": 32}

    def features(self, X):
        X = np.asarray(X, dtype=float)
        return X.reshape(len(X), -1)

    def _build(self, nin):
        return neural.build_mlp(nin, (int(self.hyper["hidden"]),), seed=self.seed)

    def _fit(self, F, y):
        self.net = self._build(F.shape[1])
        rng = np.random.default_rng(self.seed)
        bs = int(self.hyper["batch"])
        target = y.astype(float)[:, None]
        for _ in range(int(self.hyper["epochs"])):
            order = rng.permutation(len(F))
            for start in range(0, len(F), bs):
                idx = order[start : start + bs]
                p = np.clip(self.net.forward(F[idx], train=True), 1e-7, 1 - 1e-7)
                grad = (p - target[idx]) / (p * (1 - p)) / len(idx)
                self.net.backward(grad)
                neural.sgd_step(self.net.named_params(), self.net.named_grads(), self.hyper["lr"])

    def _proba(self, F):
        return self.net.forward(F)[:, 0]

    def blobs(self):
        return dict(self.net.state_dict())

    def load_blobs(self, blobs):
        first = blobs["dense1.w"]
        self.net = self._build(first.shape[0])
        self.net.load_state_dict(blobs)


DETECTORS = {cls.kind: cls for cls in (LogisticRegression, GaussianNB, DecisionTree, MLPDetector)}


def register_detector(kind, cls):
    """Make a :class:`Detector` subclass available to :func:`fit` under ``kind``."""
    if not (isinstance(cls, type) and issubclass(cls, Detector)):
        raise TypeError("detector implementations must subclass Detector")
    DETECTORS[kind] = cls


def make_detector(kind, seed=0, **hyper):
    if kind not in DETECTORS:
        if kind in PLUGIN_KINDS:
            raise NotImplementedError(
                f"{kind} is a plugin point with no bundled implementation; use register_detector()"
            )
        raise ValueError(f"unknown detector kind {kind!r}; known: {sorted(DETECTORS)}")
    return DETECTORS[kind](seed=seed, **hyper)


def fit(kind, train, hyper=None, seed=0) -> Detector:
    X, y = as_arrays(train)
    return make_detector(kind, seed=seed, **(hyper or {})).fit(X, y)


def predict_proba(model: Detector, sample):
    if isinstance(sample, FeatureSample):
        sample = sample.matrix
    return model.predict_proba(sample)


def bbda(model: Detector, samples) -> float:
    """Fraction of malware matrices the detector flags as malware."""
    if isinstance(samples, np.ndarray):
        X = samples
    else:
        samples = list(samples)
        if samples and any(getattr(s, "label", 1) != 1 for s in samples):
            raise ValueError("bbda expects malware samples only")
        X = np.stack([getattr(s, "matrix", s) for s in samples]) if samples else np.zeros((0, 64, 64))
    if len(X) == 0:
        raise NoSamples("bbda of an empty sample set")
    return float(np.mean(model.predict(X)))


@dataclass
class EvalReport:
    detector: str
    split_mode: str
    bbda_original: float
    bbda_trained: float
    extra: dict = field(default_factory=dict)

    @property
    def improvement(self) -> float:
        if self.bbda_original == 0:
            return float("nan")
        return abs(self.bbda_original - self.bbda_trained) / abs(self.bbda_original)

    @property
    def signed_change(self) -> float:
        return self.bbda_trained - self.bbda_original


def save_detector(model: Detector, path):
    meta = {"hyper": model.hyper, "seed": model.seed}
    write_model(path, model.kind, model.blobs(), meta)


def load_detector(path) -> Detector:
    kind, blobs, meta = read_model(path)
    model = make_detector(kind, seed=meta.get("seed", 0), **meta.get("hyper", {}))
    model.load_blobs(blobs)
    model.fitted = True
    return model
