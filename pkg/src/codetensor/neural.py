"""A small NHWC neural-network kernel: forward, backward and SGD.

Only the layer types needed by the discriminator, generator, perceptual
feature network and MLP detector are provided. A :class:`Network` is a flat
list of layers; residual connections are expressed with a :class:`Mark`
layer that remembers its input and an :class:`AddFrom` layer that adds the
remembered tensor back (optionally center-cropped) further down.

Every layer keeps whatever it needs from the last ``forward`` call, so
``backward`` must follow the ``forward`` whose gradient is wanted.
"""

from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import BuildError, LayerError, ShapeError

LEAKY_SLOPE = 0.2
PROFILES = ("paper", "desk")


class Layer:
    kind = "layer"
    table_row = True  # shows up in the layer tables' output-size column

    def __init__(self):
        self.params = OrderedDict()
        self.grads = OrderedDict()
        self.buffers = OrderedDict()
        self.name = self.kind

    def output_shape(self, shape):
        return tuple(shape)

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}({self.name})"


# ---------------------------------------------------------------------------
# geometry helpers


def _same_pads(size, k_eff, stride):
    out = -(-size // stride)
    total = max((out - 1) * stride + k_eff - size, 0)
    return total // 2, total - total // 2


def _crop(x, c):
    if c == 0:
        return x
    return x[:, c:-c, c:-c, :]


class Pad(Layer):
    """Spatial padding of ``width`` pixels on each side (zero or reflect)."""

    kind = "pad"

    def __init__(self, width, mode="zero"):
        super().__init__()
        if mode not in ("zero", "reflect"):
            raise BuildError(f"unknown padding mode {mode!r}")
        self.width = int(width)
        self.mode = mode

    def output_shape(self, shape):
        h, w, c = shape
        return (h + 2 * self.width, w + 2 * self.width, c)

    def forward(self, x, train=False):
        p = self.width
        pad = ((0, 0), (p, p), (p, p), (0, 0))
        return np.pad(x, pad, mode="reflect" if self.mode == "reflect" else "constant")

    def backward(self, dy):
        p = self.width
        if self.mode == "zero":
            return np.ascontiguousarray(_crop(dy, p))
        # reflect: fold the mirrored border gradients back onto their sources
        g = dy.copy()
        for axis in (1, 2):
            g = np.moveaxis(g, axis, 0)
            n = g.shape[0] - 2 * p
            core = g[p : p + n].copy()
            for i in range(p):
                core[p - i] += g[i]
                core[n - 2 - i] += g[p + n + i]
            g = np.moveaxis(core, 0, axis)
        return g


def _window_corr(xp, w, stride, dilation, ho, wo):
    """Strided, dilated correlation of ``xp`` (NHWC) with ``w`` (k, k, cin, cout)."""
    k = w.shape[0]
    k_eff = dilation * (k - 1) + 1
    win = sliding_window_view(xp, (k_eff, k_eff), axis=(1, 2))
    win = win[:, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride, :, ::dilation, ::dilation]
    return np.tensordot(win, w, axes=([3, 4, 5], [2, 0, 1]))


class Conv2D(Layer):
    """2-D convolution, weights ``(kh, kw, cin, cout)``.

    ``padding`` is ``"valid"``, ``"same"`` (TensorFlow convention, possibly
    asymmetric) or a non-negative int applied on all sides.
    """

    kind = "conv"

    def __init__(self, cin, cout, kernel, stride=1, padding="valid", dilation=1, bias=True):
        super().__init__()
        self.cin, self.cout, self.k = int(cin), int(cout), int(kernel)
        self.stride, self.dilation, self.padding = int(stride), int(dilation), padding
        self.params["w"] = np.zeros((self.k, self.k, self.cin, self.cout))
        if bias:
            self.params["b"] = np.zeros(self.cout)

    @property
    def k_eff(self):
        return self.dilation * (self.k - 1) + 1

    def _pads(self, h, w):
        if self.padding == "valid":
            return (0, 0), (0, 0)
        if self.padding == "same":
            return _same_pads(h, self.k_eff, self.stride), _same_pads(w, self.k_eff, self.stride)
        p = int(self.padding)
        return (p, p), (p, p)

    def output_shape(self, shape):
        h, w, c = shape
        if c != self.cin:
            raise ShapeError(f"{self.name}: expected {self.cin} channels, got {c}")
        (pt, pb), (pl, pr) = self._pads(h, w)
        ho = (h + pt + pb - self.k_eff) // self.stride + 1
        wo = (w + pl + pr - self.k_eff) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"{self.name}: input {h}x{w} smaller than kernel")
        return (ho, wo, self.cout)

    def init(self, rng):
        fan_in = self.k * self.k * self.cin
        limit = math.sqrt(6.0 / fan_in)
        w = self.params["w"]
        w[...] = rng.uniform(-limit, limit, size=w.shape)
        if "b" in self.params:
            self.params["b"][...] = 0.0

    def _taps(self, ho, wo):
        s, d = self.stride, self.dilation
        for dy in range(self.k):
            for dx in range(self.k):
                ys = slice(dy * d, dy * d + s * (ho - 1) + 1, s)
                xs = slice(dx * d, dx * d + s * (wo - 1) + 1, s)
                yield dy, dx, ys, xs

    def forward(self, x, train=False):
        n, h, w, c = x.shape
        ho, wo, _ = self.output_shape((h, w, c))
        (pt, pb), (pl, pr) = self._pads(h, w)
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if pt or pb or pl or pr else x
        W = self.params["w"]
        if self.cin == 1:
            # a per-tap matmul with inner dimension 1 is slow; correlate windows instead
            out = _window_corr(xp, W, self.stride, self.dilation, ho, wo)
        else:
            out = np.zeros((n, ho, wo, self.cout), dtype=np.result_type(x, W))
            for dy, dx, ys, xs in self._taps(ho, wo):
                out += xp[:, ys, xs, :] @ W[dy, dx]
        if "b" in self.params:
            out += self.params["b"]
        self._cache = (xp, (pt, pb, pl, pr), x.shape)
        return out

    def backward(self, dy):
        xp, (pt, pb, pl, pr), xshape = self._cache
        n, ho, wo, _ = dy.shape
        W = self.params["w"]
        gw = np.zeros_like(W)
        flat_dy = dy.reshape(-1, self.cout)
        full_corr = self.cout == 1 and self.stride == 1
        if full_corr:
            # input gradient = correlation of the border-padded output gradient
            # with the spatially flipped kernel
            e = self.k_eff - 1
            dyp = np.pad(dy, ((0, 0), (e, e), (e, e), (0, 0)))
            wf = W[::-1, ::-1].transpose(0, 1, 3, 2)
            used = _window_corr(dyp, wf, 1, self.dilation, ho + e, wo + e)
            gxp = np.zeros_like(xp, dtype=used.dtype)
            gxp[:, : ho + e, : wo + e, :] = used
        else:
            gxp = np.zeros_like(xp)
        for ky, kx, ys, xs in self._taps(ho, wo):
            patch = xp[:, ys, xs, :]
            gw[ky, kx] = patch.reshape(-1, self.cin).T @ flat_dy
            if not full_corr:
                gxp[:, ys, xs, :] += dy @ W[ky, kx].T
        self.grads["w"] = gw
        if "b" in self.params:
            self.grads["b"] = flat_dy.sum(axis=0)
        h, w = xshape[1], xshape[2]
        return np.ascontiguousarray(gxp[:, pt : pt + h, pl : pl + w, :])


class Dense(Layer):
    kind = "dense"

    def __init__(self, nin, nout):
        super().__init__()
        self.nin, self.nout = int(nin), int(nout)
        self.params["w"] = np.zeros((self.nin, self.nout))
        self.params["b"] = np.zeros(self.nout)

    def output_shape(self, shape):
        if tuple(shape) != (self.nin,):
            raise ShapeError(f"{self.name}: expected ({self.nin},), got {tuple(shape)}")
        return (self.nout,)

    def init(self, rng):
        limit = math.sqrt(6.0 / self.nin)
        self.params["w"][...] = rng.uniform(-limit, limit, size=self.params["w"].shape)
        self.params["b"][...] = 0.0

    def forward(self, x, train=False):
        self._x = x
        return x @ self.params["w"] + self.params["b"]

    def backward(self, dy):
        self.grads["w"] = self._x.T @ dy
        self.grads["b"] = dy.sum(axis=0)
        return dy @ self.params["w"].T


class BatchNorm(Layer):
    """Per-channel batch normalization over every axis but the last.

    Training mode normalizes with batch statistics and updates the running
    estimates; inference mode uses the running estimates (an affine map).
    """

    kind = "batchnorm"

    def __init__(self, channels, momentum=0.9, eps=1e-5):
        super().__init__()
        self.channels = int(channels)
        self.momentum, self.eps = momentum, eps
        self.params["gamma"] = np.ones(self.channels)
        self.params["beta"] = np.zeros(self.channels)
        self.buffers["mean"] = np.zeros(self.channels)
        self.buffers["var"] = np.ones(self.channels)

    def output_shape(self, shape):
        if shape[-1] != self.channels:
            raise ShapeError(f"{self.name}: expected {self.channels} channels, got {shape[-1]}")
        return tuple(shape)

    def init(self, rng):
        self.params["gamma"][...] = 1.0
        self.params["beta"][...] = 0.0
        self.buffers["mean"][...] = 0.0
        self.buffers["var"][...] = 1.0

    def forward(self, x, train=False):
        axes = tuple(range(x.ndim - 1))
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            self.buffers["mean"][...] = m * self.buffers["mean"] + (1 - m) * mean
            self.buffers["var"][...] = m * self.buffers["var"] + (1 - m) * var
        else:
            mean, var = self.buffers["mean"], self.buffers["var"]
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv
        self._cache = (xhat, inv, train, axes)
        return xhat * self.params["gamma"] + self.params["beta"]

    def backward(self, dy):
        xhat, inv, train, axes = self._cache
        gamma = self.params["gamma"]
        self.grads["gamma"] = (dy * xhat).sum(axis=axes)
        self.grads["beta"] = dy.sum(axis=axes)
        if not train:
            return dy * gamma * inv
        n = dy.size // dy.shape[-1]
        dxhat = dy * gamma
        return inv / n * (n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))


class LeakyReLU(Layer):
    kind = "leakyrelu"

    def __init__(self, slope=LEAKY_SLOPE):
        super().__init__()
        self.slope = slope

    def forward(self, x, train=False):
        self._pos = x > 0
        return np.where(self._pos, x, self.slope * x)

    def backward(self, dy):
        return np.where(self._pos, dy, self.slope * dy)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False):
        self._pos = x > 0
        return np.where(self._pos, x, 0.0)

    def backward(self, dy):
        return np.where(self._pos, dy, 0.0)


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x, train=False):
        y = np.empty_like(x, dtype=np.result_type(x, np.float32))
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)
        self._y = y
        return y

    def backward(self, dy):
        return dy * self._y * (1.0 - self._y)


class Clamp(Layer):
    """Clip to ``[lo, hi]``; gradient passes only where the input was inside."""

    kind = "lambda"

    def __init__(self, lo=0.0, hi=1.0):
        super().__init__()
        self.lo, self.hi = lo, hi

    def forward(self, x, train=False):
        self._inside = (x >= self.lo) & (x <= self.hi)
        return np.clip(x, self.lo, self.hi)

    def backward(self, dy):
        return np.where(self._inside, dy, 0.0)


class Upsample(Layer):
    """Nearest-neighbour upsampling, after an optional center crop of ``crop`` pixels."""

    kind = "upsample"

    def __init__(self, factor=2, crop=0):
        super().__init__()
        self.factor, self.crop = int(factor), int(crop)

    def output_shape(self, shape):
        h, w, c = shape
        return ((h - 2 * self.crop) * self.factor, (w - 2 * self.crop) * self.factor, c)

    def forward(self, x, train=False):
        self._shape = x.shape
        f = self.factor
        return _crop(x, self.crop).repeat(f, axis=1).repeat(f, axis=2)

    def backward(self, dy):
        n, h, w, c = dy.shape
        f = self.factor
        g = dy.reshape(n, h // f, f, w // f, f, c).sum(axis=(2, 4))
        if self.crop:
            g = np.pad(g, ((0, 0), (self.crop,) * 2, (self.crop,) * 2, (0, 0)))
        return g


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._shape)


class Mark(Layer):
    """Identity that remembers its input under ``key`` for a later :class:`AddFrom`."""

    kind = "mark"
    table_row = False

    def __init__(self, key):
        super().__init__()
        self.key = key

    def forward(self, x, train=False):
        return x

    def backward(self, dy):
        return dy


class AddFrom(Layer):
    """Add the tensor remembered by ``Mark(key)``, center-cropped by ``crop``."""

    kind = "add"

    def __init__(self, key, crop=0):
        super().__init__()
        self.key, self.crop = key, int(crop)

    def forward(self, x, train=False):  # the network supplies the saved tensor
        raise RuntimeError("AddFrom is evaluated by Network.forward")

    def backward(self, dy):
        return dy


# ---------------------------------------------------------------------------


class Network:
    """Sequential stack of layers with optional mark/add residual links."""

    def __init__(self, layers, input_shape, name="net"):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.name = name
        counts = {}
        for layer in self.layers:
            counts[layer.kind] = counts.get(layer.kind, 0) + 1
            layer.name = f"{layer.kind}{counts[layer.kind]}"
        self.shapes = self._infer_shapes()

    def _infer_shapes(self):
        shape = self.input_shape
        marks = {}
        out = []
        for layer in self.layers:
            if isinstance(layer, Mark):
                marks[layer.key] = shape
            elif isinstance(layer, AddFrom):
                if layer.key not in marks:
                    raise BuildError(f"{layer.name}: no mark {layer.key!r} before it")
                h, w, c = marks[layer.key]
                src = (h - 2 * layer.crop, w - 2 * layer.crop, c)
                if src != tuple(shape):
                    raise BuildError(f"{layer.name}: cannot add {src} to {shape}")
            try:
                shape = layer.output_shape(shape)
            except ShapeError as exc:
                raise BuildError(str(exc)) from None
            out.append(shape)
        return out

    @property
    def output_shape(self):
        return self.shapes[-1]

    def shape_table(self, include_all=False):
        """``(layer kind, output shape)`` rows, starting with the input."""
        rows = [("input", self.input_shape)]
        for layer, shape in zip(self.layers, self.shapes):
            if include_all or layer.table_row:
                rows.append((layer.kind, shape))
        return rows

    def init(self, seed=0):
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            if hasattr(layer, "init"):
                layer.init(rng)
        return self

    def astype(self, dtype):
        for layer in self.layers:
            for store in (layer.params, layer.buffers):
                for k in store:
                    store[k] = store[k].astype(dtype)
        return self

    def named_params(self):
        return OrderedDict(
            (f"{layer.name}.{k}", v) for layer in self.layers for k, v in layer.params.items()
        )

    def named_grads(self):
        return OrderedDict(
            (f"{layer.name}.{k}", layer.grads[k]) for layer in self.layers for k in layer.params
        )

    def named_buffers(self):
        return OrderedDict(
            (f"{layer.name}.{k}", v) for layer in self.layers for k, v in layer.buffers.items()
        )

    def state_dict(self):
        state = self.named_params()
        for k, v in self.named_buffers().items():
            state[f"buffer:{k}"] = v
        return OrderedDict((k, v.copy()) for k, v in state.items())

    def load_state_dict(self, state):
        own = self.named_params()
        own.update((f"buffer:{k}", v) for k, v in self.named_buffers().items())
        if set(own) != set(state):
            missing = sorted(set(own) ^ set(state))
            raise ShapeError(f"state mismatch for {self.name}: {missing[:5]}")
        for k, v in state.items():
            if own[k].shape != np.shape(v):
                raise ShapeError(f"{k}: shape {np.shape(v)} != {own[k].shape}")
            own[k][...] = v
        return self

    def n_params(self):
        return sum(v.size for v in self.named_params().values())

    def forward(self, x, train=False, upto=None):
        """Run the stack; ``upto`` stops after that many layers."""
        x = np.asarray(x)
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"{self.name}: batch shape {x.shape[1:]} != {self.input_shape}")
        saved = {}
        stop = len(self.layers) if upto is None else upto
        for layer in self.layers[:stop]:
            if isinstance(layer, Mark):
                saved[layer.key] = x
            elif isinstance(layer, AddFrom):
                x = x + _crop(saved[layer.key], layer.crop)
                continue
            x = layer.forward(x, train)
        self._ran = stop
        return x

    __call__ = forward

    def backward(self, dy):
        """Backpropagate ``dy``; fills every layer's ``grads`` and returns the input gradient."""
        pending = {}
        for layer in reversed(self.layers[: self._ran]):
            if isinstance(layer, AddFrom):
                g = dy
                if layer.crop:
                    c = layer.crop
                    g = np.pad(dy, ((0, 0), (c, c), (c, c), (0, 0)))
                pending[layer.key] = pending.get(layer.key, 0) + g
                continue
            dy = layer.backward(dy)
            if isinstance(layer, Mark) and layer.key in pending:
                dy = dy + pending.pop(layer.key)
        return dy


def sgd_step(params, grads, lr, direction="descend"):
    """In-place ``theta -= lr * g`` (``descend``) or ``theta += lr * g`` (``ascend``)."""
    if direction not in ("descend", "ascend"):
        raise ValueError(f"direction must be 'descend' or 'ascend', got {direction!r}")
    sign = -1.0 if direction == "descend" else 1.0
    for name, p in params.items():
        g = grads[name]
        if p.shape != g.shape:
            raise ShapeError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        p += sign * lr * g
    return params


# ---------------------------------------------------------------------------
# architectures


def _profile_factor(profile, factor):
    if profile not in PROFILES:
        raise BuildError(f"profile must be one of {PROFILES}, got {profile!r}")
    if profile == "paper":
        return 1
    if factor < 1:
        raise BuildError(f"width factor must be >= 1, got {factor}")
    return int(factor)


def _silent(layer):
    layer.table_row = False
    return layer


def build_discriminator(profile="desk", factor=8, seed=0, slope=LEAKY_SLOPE, pad_mode="zero"):
    """Substitute detector: 64x64x1 feature matrix -> malware probability.

    The ``paper`` profile follows the published layer table (64/64/128/128
    conv channels, 1024 hidden units); ``desk`` divides those widths by
    ``factor``. The first convolution is dilated by 2 so that, after the
    3-pixel padding, a 4x4 stride-2 kernel yields the tabulated 32x32 map.
    """
    f = _profile_factor(profile, factor)
    c1, c2, c3, hidden = 64 // f, 64 // f, 128 // f, 1024 // f
    if min(c1, c2, c3, hidden) < 1:
        raise BuildError(f"factor {factor} leaves a layer without channels")
    layers = [
        Pad(3, pad_mode),
        Conv2D(1, c1, 4, stride=2, dilation=2), LeakyReLU(slope),
        Conv2D(c1, c2, 4, stride=2, padding="same", bias=False), BatchNorm(c2), LeakyReLU(slope),
        Conv2D(c2, c3, 4, stride=2, padding="same", bias=False), BatchNorm(c3), LeakyReLU(slope),
        Conv2D(c3, c3, 4, stride=1, padding="same", bias=False), BatchNorm(c3), LeakyReLU(slope),
        Conv2D(c3, 1, 4, stride=1, padding="same"),
        Flatten(),
        Dense(64, hidden), _silent(LeakyReLU(slope)),
        Dense(hidden, 1), _silent(Sigmoid()),
    ]
    return Network(layers, (64, 64, 1), name="discriminator").init(seed)


def _resblock(c, n, pad_mode):
    key = f"res{n}"
    return [
        Mark(key),
        Conv2D(c, c, 3, bias=False), _silent(BatchNorm(c)), _silent(ReLU()),
        Pad(1, pad_mode),
        Conv2D(c, c, 3, bias=False), _silent(BatchNorm(c)),
        AddFrom(key, crop=1),
        Pad(1, pad_mode),
    ]


def build_generator(profile="desk", factor=8, seed=0, n_res=None, slope=LEAKY_SLOPE, pad_mode="zero"):
    """Residual generator: 64x64x1 -> 64x64x1 raw output ``T``.

    ``paper`` uses 64/128/256 channels and nine residual blocks; ``desk``
    divides the widths by ``factor`` and uses two blocks. The input is added
    back before the final clamp to [0, 1].
    """
    f = _profile_factor(profile, factor)
    c1, c2, c3 = 64 // f, 128 // f, 256 // f
    if min(c1, c2, c3) < 1:
        raise BuildError(f"factor {factor} leaves a layer without channels")
    if n_res is None:
        n_res = 9 if profile == "paper" else 2
    layers = [
        Mark("input"),
        Pad(3, pad_mode),
        Conv2D(1, c1, 7), LeakyReLU(slope),
        Conv2D(c1, c2, 3, stride=2, padding="same", bias=False), BatchNorm(c2), _silent(ReLU()),
        Conv2D(c2, c3, 3, stride=2, padding="same", bias=False), BatchNorm(c3), _silent(ReLU()),
        Pad(1, pad_mode),
    ]
    for n in range(n_res):
        layers += _resblock(c3, n, pad_mode)
    layers += [
        Upsample(2, crop=1),
        Conv2D(c3, c2, 3, padding="same", bias=False), BatchNorm(c2), _silent(ReLU()),
        Upsample(2),
        Conv2D(c2, c1, 3, padding="same", bias=False), BatchNorm(c1), _silent(ReLU()),
        Pad(3, pad_mode),
        Conv2D(c1, 1, 7),
        AddFrom("input"),
        Clamp(0.0, 1.0),
    ]
    return Network(layers, (64, 64, 1), name="generator").init(seed)


def zero_final_conv(net):
    """Zero the last convolution so a skip-connected generator starts as ``clamp(input)``."""
    last = [layer for layer in net.layers if isinstance(layer, Conv2D)][-1]
    for v in last.params.values():
        v[...] = 0.0
    return net


def build_feature_net(seed=1234, channels=(8, 16, 16)):
    """Frozen random conv stack used as the perceptual feature extractor."""
    c1, c2, c3 = channels
    layers = [
        Conv2D(1, c1, 3, stride=2, padding="same"), ReLU(),
        Conv2D(c1, c2, 3, stride=2, padding="same"), ReLU(),
        Conv2D(c2, c3, 3, stride=1, padding="same"), ReLU(),
    ]
    return Network(layers, (64, 64, 1), name="features").init(seed)


def feature_stage_end(net, j):
    """Layer count covering feature stage ``j`` (1-based; one stage = conv + activation)."""
    stages = [i + 1 for i, layer in enumerate(net.layers) if isinstance(layer, (ReLU, LeakyReLU))]
    if not 1 <= j <= len(stages):
        raise LayerError(f"feature layer {j} outside [1, {len(stages)}]")
    return stages[j - 1]


def build_mlp(nin, hidden=(64,), seed=0):
    layers = []
    prev = nin
    for h in hidden:
        layers += [Dense(prev, h), ReLU()]
        prev = h
    layers += [Dense(prev, 1), Sigmoid()]
    return Network(layers, (nin,), name="mlp").init(seed)


# ---------------------------------------------------------------------------
# gradient checking


def numeric_grad(f, x, idx, eps=1e-5):
    """Central difference of scalar ``f()`` w.r.t. ``x[idx]`` (``x`` modified in place)."""
    old = x[idx]
    x[idx] = old + eps
    up = f()
    x[idx] = old - eps
    down = f()
    x[idx] = old
    return (up - down) / (2 * eps)


def _rel(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def _kink_state(net):
    """Which side of its kink every ReLU / LeakyReLU / Clamp unit was on in the last forward."""
    masks = []
    for layer in net.layers[: getattr(net, "_ran", len(net.layers))]:
        m = getattr(layer, "_pos", None)
        if m is None:
            m = getattr(layer, "_inside", None)
        if m is not None:
            masks.append(m.copy())
    return masks


def gradcheck(net, x, samples=8, eps=1e-5, train=True, seed=0):
    """Compare analytic and central-difference gradients on a random projection loss.

    Returns ``{name: relative error}`` for the input and for every parameter
    tensor, using up to ``samples`` randomly chosen coordinates of each.
    A coordinate whose +/-eps perturbation moves any ReLU, LeakyReLU or clamp
    unit across its kink is skipped, since the central difference is not a
    derivative there. Runs in float64.
    """
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=float)
    net.astype(float)
    out = net.forward(x, train=train)
    proj = rng.standard_normal(out.shape)
    buffers = {k: v.copy() for k, v in net.named_buffers().items()}

    def loss():
        for k, v in net.named_buffers().items():
            v[...] = buffers[k]
        return float((net.forward(x, train=train) * proj).sum())

    loss()
    base = _kink_state(net)
    gx = net.backward(proj)
    grads = {k: v.copy() for k, v in net.named_grads().items()}
    report = {}

    def probe(arr, idx):
        old = arr[idx]
        vals = []
        for step in (eps, -eps):
            arr[idx] = old + step
            vals.append(loss())
            crossed = any(not np.array_equal(a, b) for a, b in zip(base, _kink_state(net)))
            if crossed:
                arr[idx] = old
                return None
        arr[idx] = old
        return (vals[0] - vals[1]) / (2 * eps)

    def check(name, arr, analytic):
        num, ana = [], []
        for flat in rng.permutation(arr.size):
            if len(num) >= samples:
                break
            idx = np.unravel_index(flat, arr.shape)
            g = probe(arr, idx)
            if g is not None:
                num.append(g)
                ana.append(analytic[idx])
        report[name] = _rel(ana, num) if num else float("nan")

    check("input", x, gx)
    for name, p in net.named_params().items():
        check(name, p, grads[name])
    loss()
    return report
