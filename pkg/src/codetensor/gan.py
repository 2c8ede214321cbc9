"""Adversarial training of the generator against a substitute discriminator.

The discriminator ``D`` outputs a malware probability and is trained to
mimic the Black-Bone detector: its targets are the detector's *predictions*,
not ground truth. Its loss over a mixed batch (benign samples plus generated
malware) is the batch mean of::

    [BD says benign] * log D(x)  +  [BD says malware] * log(1 - D(x))

which is minimized. The generator maps a malware matrix ``M`` to a raw
output ``T``; the emitted sample is the elementwise mean of ``M`` and ``T``.
Its objective, maximized with ``D`` frozen, is::

    mean log(1 - D(G(M)))  -  lam * perceptual(G(M), M)

where the perceptual term compares feature maps of a fixed random conv net.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from . import neural
from .containers import read_model, write_model
from .detectors import EvalReport, bbda, make_detector
from .errors import NoSamples, ShapeError, TrainingDiverged

EPS = 1e-7
HISTORY_FIELDS = ("step", "loss_d", "loss_g", "perceptual", "bbda_generated", "d_accuracy")


@dataclass
class GanConfig:
    epochs: int = 40
    m: int = 16
    lr_d: float = 0.01
    lr_g: float = 0.1
    lam: float = 0.1
    feature_layer: int = 3
    seed: int = 0
    profile: str = "desk"
    factor: int = 8
    jitter: float = 0.05
    dtype: str = "float32"
    checkpoint_every: int = 0
    d_direction: str = "xent"

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("minibatch size m must be >= 1")
        if not (self.lr_d > 0 and self.lr_g > 0):
            raise ValueError("learning rates must be > 0")
        if self.lam < 0:
            raise ValueError("perceptual weight must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.d_direction not in ("xent", "literal"):
            raise ValueError("d_direction must be 'xent' or 'literal'")


@dataclass
class GanState:
    generator: neural.Network
    discriminator: neural.Network
    features: neural.Network
    config: GanConfig
    history: list = field(default_factory=list)
    acc0: float = float("nan")

    def snapshot(self):
        """Parameters and history only; cached activations are not copied."""
        return {
            "generator": self.generator.state_dict(),
            "discriminator": self.discriminator.state_dict(),
            "history": copy.deepcopy(self.history),
        }

    def restore(self, snap):
        self.generator.load_state_dict(snap["generator"])
        self.discriminator.load_state_dict(snap["discriminator"])
        self.history = copy.deepcopy(snap["history"])
        return self


def _nhwc(batch):
    b = np.asarray(batch)
    if b.ndim == 3:
        b = b[..., None]
    if b.ndim != 4 or b.shape[1:] != (64, 64, 1):
        raise ShapeError(f"expected a batch of 64x64 matrices, got {np.shape(batch)}")
    return b


def smooth(m_batch, raw):
    """Elementwise mean of the input matrices and the raw generator output."""
    m_batch, raw = np.asarray(m_batch), np.asarray(raw)
    if m_batch.shape != raw.shape:
        raise ShapeError(f"shape mismatch {m_batch.shape} vs {raw.shape}")
    return 0.5 * (m_batch + raw)


def smooth_generate(gen, m_batch, z=None, train=False):
    """Generated malware ``mean(M, G_raw(Z))``; ``Z`` defaults to ``M``.

    Returns the same layout as ``m_batch`` (``(n, 64, 64)`` or NHWC).
    """
    squeeze = np.ndim(m_batch) == 3
    M = _nhwc(m_batch).astype(gen_dtype(gen))
    Z = M if z is None else _nhwc(z).astype(M.dtype)
    out = smooth(M, gen.forward(Z, train=train))
    return out[..., 0] if squeeze else out


def gen_dtype(net):
    return next(iter(net.named_params().values())).dtype


def _clipped(p):
    return np.clip(p, EPS, 1 - EPS), (p > EPS) & (p < 1 - EPS)


def loss_d_from_probs(p, bd_labels):
    """Discriminator loss and its gradient w.r.t. the probabilities."""
    p = np.asarray(p, dtype=float).reshape(-1)
    lab = np.asarray(bd_labels).reshape(-1)
    pc, inside = _clipped(p)
    benign = lab == 0
    n = len(p)
    loss = float(np.where(benign, np.log(pc), np.log(1 - pc)).sum() / n)
    grad = np.where(benign, 1.0 / pc, -1.0 / (1 - pc)) / n
    return loss, np.where(inside, grad, 0.0)


def loss_d_from_logits(a, bd_labels):
    """Clipped loss value and its gradient w.r.t. the pre-sigmoid logits.

    The gradient is that of the unclipped loss, ``1 - p`` for benign-labelled
    rows and ``-p`` for malware-labelled ones; it stays informative when the
    discriminator saturates.
    """
    a = np.asarray(a, dtype=float).reshape(-1)
    p = expit(a)
    loss, _ = loss_d_from_probs(p, bd_labels)
    benign = np.asarray(bd_labels).reshape(-1) == 0
    return loss, np.where(benign, 1.0 - p, -p) / len(a)


def loss_g_from_logits(a):
    a = np.asarray(a, dtype=float).reshape(-1)
    p = expit(a)
    loss, _ = loss_g_from_probs(p)
    return loss, -p / len(a)


def d_step_direction(a, bd_labels):
    """Cross-entropy gradient w.r.t. the logits: ``p`` on benign rows, ``p - 1`` on malware rows.

    Per row it has the sign of the :func:`loss_d_from_logits` gradient and
    the same minimizers, but it does not vanish when the discriminator is
    confidently wrong, and it fades once a row is confidently right.
    """
    a = np.asarray(a, dtype=float).reshape(-1)
    p = expit(a)
    benign = np.asarray(bd_labels).reshape(-1) == 0
    return np.where(benign, p, p - 1.0) / len(a)


def _logits(d, x, train):
    """Discriminator pre-sigmoid output; the final layer must be a sigmoid."""
    if not isinstance(d.layers[-1], neural.Sigmoid):
        raise ShapeError(f"{d.name} does not end in a sigmoid")
    return d.forward(x, train=train, upto=len(d.layers) - 1)


def loss_d(d, benign_batch, mal_batch, bd_labels, train=False):
    """Batch-mean discriminator loss on ``benign_batch`` followed by ``mal_batch``.

    ``bd_labels`` are the Black-Bone predictions for the concatenated batch.
    """
    X = np.concatenate([_nhwc(benign_batch), _nhwc(mal_batch)])
    loss, _ = loss_d_from_probs(d.forward(X.astype(gen_dtype(d)), train=train), bd_labels)
    return loss


def loss_g_from_probs(p):
    p = np.asarray(p, dtype=float).reshape(-1)
    pc, inside = _clipped(p)
    loss = float(np.log(1 - pc).mean())
    grad = np.where(inside, -1.0 / (1 - pc) / len(p), 0.0)
    return loss, grad


def loss_g(d, gen, z_batch):
    """Mean ``log(1 - D(G(Z)))``; the generator maximizes it."""
    fake = smooth_generate(gen, z_batch)
    loss, _ = loss_g_from_probs(d.forward(_nhwc(fake).astype(gen_dtype(d))))
    return loss


def perceptual_loss(feat_net, validity, mal, j=3, with_grad=False):
    """Batch mean of ``||F_j(validity) - F_j(mal)||^2 / (C_j H_j W_j)``.

    With ``with_grad`` the gradient w.r.t. ``validity`` is returned too.
    """
    upto = neural.feature_stage_end(feat_net, j)
    a, b = _nhwc(validity), _nhwc(mal)
    dtype = gen_dtype(feat_net)
    fb = feat_net.forward(b.astype(dtype), upto=upto)
    fa = feat_net.forward(a.astype(dtype), upto=upto)
    size = np.prod(fa.shape[1:])
    diff = fa - fb
    loss = float((diff.astype(float) ** 2).sum() / (size * len(fa)))
    if not with_grad:
        return loss
    grad = feat_net.backward(2.0 * diff / (size * len(fa)))
    return loss, grad


def init_state(config: GanConfig) -> GanState:
    rng = np.random.default_rng(config.seed)
    sg, sd, sf = (int(s) for s in rng.integers(0, 2**31 - 1, size=3))
    g = neural.build_generator(config.profile, config.factor, seed=sg).astype(config.dtype)
    d = neural.build_discriminator(config.profile, config.factor, seed=sd).astype(config.dtype)
    f = neural.build_feature_net(seed=sf).astype(config.dtype)
    neural.feature_stage_end(f, config.feature_layer)
    return GanState(g, d, f, config)


def _sample(rng, n_pool, m):
    return rng.choice(n_pool, size=m, replace=n_pool < m)


def discriminator_grads(state: GanState, X, bd_labels, direction=None):
    """Fill the discriminator's gradients for one step on batch ``X``.

    ``direction`` ``"literal"`` gives the gradient of the recorded loss;
    ``"xent"`` the cross-entropy direction of :func:`d_step_direction`.
    Returns ``(loss_d, probabilities)``.
    """
    d = state.discriminator
    direction = direction or state.config.d_direction
    a = _logits(d, X, train=True)
    p = expit(np.asarray(a, dtype=float))
    if direction == "literal":
        l_d, da = loss_d_from_logits(a, bd_labels)
        da = np.where((p > EPS) & (p < 1 - EPS), da.reshape(p.shape), 0.0)
    else:
        l_d, _ = loss_d_from_probs(p, bd_labels)
        da = d_step_direction(a, bd_labels)
    d.backward(da.astype(gen_dtype(d)).reshape(-1, 1))
    return l_d, p.reshape(-1)


def generator_objective(state: GanState, M, B, Z):
    """``(L_G, perceptual, generated batch)`` with the generator in training mode.

    D scores the mixed batch ``[B; G(Z)]`` in training mode, as in its own
    step; its running statistics are left untouched.
    """
    g, d = state.generator, state.discriminator
    fake = smooth(M, g.forward(Z, train=True))
    buffers = {k: v.copy() for k, v in d.named_buffers().items()}
    a = _logits(d, np.concatenate([B, fake]), train=True)
    for k, v in d.named_buffers().items():
        v[...] = buffers[k]
    l_g, _ = loss_g_from_logits(a[len(B) :])
    perc = 0.0
    if state.config.lam > 0:
        perc = perceptual_loss(state.features, fake, M, state.config.feature_layer)
    return l_g, perc, fake


def generator_grads(state: GanState, M, B, Z):
    """Fill the generator's gradients of ``L_G - lam * perceptual``; D is not updated."""
    cfg = state.config
    g, d = state.generator, state.discriminator
    dtype = gen_dtype(g)
    fake = smooth(M, g.forward(Z, train=True))
    buffers = {k: v.copy() for k, v in d.named_buffers().items()}
    a = _logits(d, np.concatenate([B, fake]), train=True)
    for k, v in d.named_buffers().items():
        v[...] = buffers[k]
    l_g, dag = loss_g_from_logits(a[len(B) :])
    da = np.concatenate([np.zeros(len(B)), dag]).astype(dtype).reshape(-1, 1)
    d_fake = d.backward(da)[len(B) :]
    perc = 0.0
    if cfg.lam > 0:
        perc, d_perc = perceptual_loss(state.features, fake, M, cfg.feature_layer, with_grad=True)
        d_fake = d_fake - cfg.lam * d_perc
    # the emitted sample is (M + T) / 2
    g.backward(0.5 * d_fake)
    return l_g, perc, fake


def train_step(state: GanState, mal, benign, black_bone, rng):
    """One discriminator descent step and one generator ascent step."""
    cfg = state.config
    g, d = state.generator, state.discriminator
    dtype = gen_dtype(g)
    M = _nhwc(mal).astype(dtype)
    B = _nhwc(benign).astype(dtype)
    Z = M
    if cfg.jitter > 0:
        Z = np.clip(M + rng.normal(0.0, cfg.jitter, size=M.shape).astype(dtype), 0.0, 1.0)

    # discriminator: descend on the loss against Black-Bone labels
    X = np.concatenate([B, smooth(M, g.forward(Z, train=True))])
    bd_labels = black_bone.predict(X[..., 0])
    l_d, p = discriminator_grads(state, X, bd_labels)
    neural.sgd_step(d.named_params(), d.named_grads(), cfg.lr_d, "descend")
    d_acc = float(np.mean((p >= 0.5).astype(int) == bd_labels))

    # generator: ascend on L_G - lam * perceptual with D frozen
    l_g, perc, fake = generator_grads(state, M, B, Z)
    neural.sgd_step(g.named_params(), g.named_grads(), cfg.lr_g, "ascend")

    fooled = float(np.mean(black_bone.predict(fake[..., 0])))
    return {"loss_d": l_d, "loss_g": l_g, "perceptual": perc, "bbda_generated": fooled, "d_accuracy": d_acc}


def train(config: GanConfig, malware, benign, black_bone, checkpoint_dir=None):
    """Run the adversarial loop; returns ``(GanState, EvalReport)``.

    ``malware`` and ``benign`` are ``(n, 64, 64)`` arrays. The report holds
    the Black-Bone BBDA on the real malware before training and on the
    generated version of the same malware after training.
    """
    malware = np.asarray(malware, dtype=float)
    benign = np.asarray(benign, dtype=float)
    if len(malware) == 0 or len(benign) == 0:
        raise NoSamples("GAN training needs malware and benign samples")
    state = init_state(config)
    state.acc0 = bbda(black_bone, malware)
    rng = np.random.default_rng([config.seed, 1])
    last_good = state.snapshot()
    for step in range(1, config.epochs + 1):
        mi = _sample(rng, len(malware), config.m)
        bi = _sample(rng, len(benign), config.m)
        rec = train_step(state, malware[mi], benign[bi], black_bone, rng)
        if not all(np.isfinite(v) for v in rec.values()) or not _finite(state):
            raise TrainingDiverged(f"non-finite loss at step {step}", state.restore(last_good))
        state.history.append({"step": step, **rec})
        last_good = state.snapshot()
        if checkpoint_dir and config.checkpoint_every and step % config.checkpoint_every == 0:
            save_checkpoint(state, f"{checkpoint_dir}/gan_step{step:05d}.cmdl")
    generated = generate(state, malware)
    report = EvalReport("", "", state.acc0, bbda(black_bone, generated))
    return state, report


def _finite(state):
    return all(np.all(np.isfinite(v)) for net in (state.generator, state.discriminator)
               for v in net.named_params().values())


def generate(state: GanState, malware, batch=64):
    """Generated malware for every input matrix (inference mode, no jitter)."""
    malware = np.asarray(malware)
    out = [smooth_generate(state.generator, malware[i : i + batch]) for i in range(0, len(malware), batch)]
    return np.concatenate(out).astype(float) if out else np.zeros((0, 64, 64))


def retrain_and_improve(state: GanState, black_bone, kind, train_mal, train_benign, test_mal,
                        hyper=None, seed=0, gen_from=None):
    """Refit a fresh detector with generated malware added; compare recall on ``test_mal``.

    Generated samples come from ``gen_from`` (default ``train_mal``) and are
    labelled malware; benign samples are not augmented. ``bbda_original`` is
    the original detector's recall on the held-out real malware (ACC0),
    ``bbda_trained`` the retrained detector's (ACC1).
    """
    test_mal = np.asarray(test_mal, dtype=float)
    if len(test_mal) == 0:
        raise NoSamples("empty malware test set")
    train_mal = np.asarray(train_mal, dtype=float).reshape(-1, 64, 64)
    train_benign = np.asarray(train_benign, dtype=float).reshape(-1, 64, 64)
    gen = generate(state, train_mal if gen_from is None else gen_from)
    X = np.concatenate([train_mal, gen, train_benign])
    y = np.concatenate([np.ones(len(train_mal) + len(gen), int), np.zeros(len(train_benign), int)])
    model = make_detector(kind, seed=seed, **(hyper or {})).fit(X, y)
    acc0 = bbda(black_bone, test_mal)
    acc1 = bbda(model, test_mal)
    return EvalReport(kind, "", acc0, acc1, {"retrained": model})


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(state: GanState, path):
    blobs = {}
    for prefix, net in (("g", state.generator), ("d", state.discriminator)):
        for k, v in net.state_dict().items():
            blobs[f"{prefix}:{k}"] = v
    meta = {"config": asdict(state.config), "steps": len(state.history), "acc0": state.acc0}
    write_model(path, "GAN", blobs, meta)


def load_checkpoint(path) -> GanState:
    _, blobs, meta = read_model(path)
    cfg = GanConfig(**meta["config"])
    state = init_state(cfg)
    for prefix, net in (("g", state.generator), ("d", state.discriminator)):
        part = {k[len(prefix) + 1 :]: v for k, v in blobs.items() if k.startswith(prefix + ":")}
        net.load_state_dict(part)
    state.acc0 = meta.get("acc0", float("nan"))
    return state
