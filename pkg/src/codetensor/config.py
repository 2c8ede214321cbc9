"""Pipeline configuration: flat dotted keys with typed defaults.

Files are INI style. ``[gan]`` followed by ``epochs = 50`` sets
``gan.epochs``; keys outside any section may also be written in dotted form
(``gan.epochs = 50``). Unknown keys are rejected. The ``CODETENSOR_SEED``
environment variable, when set, overrides every ``*.seed`` key.
"""

from __future__ import annotations

import configparser
import os

from .errors import ConfigError

SEED_ENV = "CODETENSOR_SEED"

DEFAULTS = {
    "paths.corpus": "corpus",
    "paths.work": "work",
    "corpus.n_benign": 100,
    "corpus.n_malware": 100,
    "corpus.seed": 0,
    "corpus.variant_rate": 0.2,
    "glcm.levels": 16,
    "glcm.dx": 1,
    "glcm.dy": 0,
    "cut.threshold": 0.05,
    "cut.eps": 0.0,
    "cut.min_rows": 64,
    "lsh.k": 8,
    "lsh.l": 8,
    "lsh.r": 0.1,
    "lsh.seed": 0,
    "lsh.metric": "euclidean",
    "select.cap": 8,
    "tsvd.rank": 64,
    "split.modes": "shared",
    "split.seed": 0,
    "detector.kinds": "DT,LR",
    "detector.pool": 4,
    "detector.seed": 0,
    "detector.max_depth": 6,
    "detector.lr": 1.0,
    "detector.epochs": 300,
    "gan.epochs": 40,
    "gan.m": 16,
    "gan.lr_d": 0.01,
    "gan.lr_g": 0.1,
    "gan.lambda": 0.1,
    "gan.layer": 3,
    "gan.profile": "desk",
    "gan.factor": 8,
    "gan.jitter": 0.05,
    "gan.seed": 0,
    "gan.seeds": 1,
    "gan.checkpoint_every": 0,
}

CHOICES = {
    "lsh.metric": ("euclidean", "hamming"),
    "gan.profile": ("desk", "paper"),
}


def _coerce(key, value):
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            v = str(value).strip().lower() in ("1", "true", "yes", "on")
        elif isinstance(default, int):
            v = int(value)
        elif isinstance(default, float):
            v = float(value)
        else:
            v = str(value).strip()
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot parse {value!r} as {type(default).__name__}") from None
    if key in CHOICES and v not in CHOICES[key]:
        raise ConfigError(f"{key}: {v!r} is not one of {CHOICES[key]}")
    return v


class PipelineConfig(dict):
    """Mapping of every known key to its value."""

    def __init__(self, values=None):
        super().__init__(DEFAULTS)
        for k, v in (values or {}).items():
            self[k] = v

    def __setitem__(self, key, value):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown configuration key {key!r}")
        super().__setitem__(key, _coerce(key, value))

    def update(self, other=(), **kw):
        for k, v in dict(other, **kw).items():
            self[k] = v

    def section(self, name):
        """``{'epochs': ..., ...}`` for every ``name.*`` key."""
        pre = name + "."
        return {k[len(pre) :]: v for k, v in self.items() if k.startswith(pre)}

    def list(self, key):
        return [s.strip() for s in str(self[key]).split(",") if s.strip()]

    def to_ini(self) -> str:
        lines = []
        current = None
        for key in DEFAULTS:
            sec, name = key.split(".", 1)
            if sec != current:
                lines.append(f"{'' if current is None else chr(10)}[{sec}]")
                current = sec
            lines.append(f"{name} = {self[key]}")
        return "\n".join(lines) + "\n"


def parse_config(text: str) -> dict:
    cp = configparser.ConfigParser(interpolation=None, default_section="\0none")
    cp.optionxform = str
    try:
        cp.read_string("[\0top]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed configuration: {exc}") from None
    out = {}
    for sec in cp.sections():
        for name, value in cp.items(sec):
            key = name if sec == "\0top" else f"{sec}.{name}"
            out[key] = value
    return out


def load_config(path=None, overrides=None, env=None) -> PipelineConfig:
    """Defaults, then the file at ``path``, then ``overrides``, then the seed env var."""
    cfg = PipelineConfig()
    if path is not None:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        cfg.update(parse_config(text))
    cfg.update(overrides or {})
    env = os.environ if env is None else env
    if env.get(SEED_ENV, "") != "":
        for key in DEFAULTS:
            if key.endswith(".seed"):
                cfg[key] = env[SEED_ENV]
    return cfg
