"""INI-style run configuration.

Sections map onto dotted keys (``[cost] kind = ...`` is ``cost.kind``).
Every key is validated; unknown keys raise :class:`ConfigError` naming the
offending key.

Example::

    [data]
    kind = ring
    n_modes = 10
    n_points = 2000

    [cost]
    kind = squared_euclidean
    scale = auto

    [train]
    lr = 5e-5
    m = 64
    n_critic = 5
    max_steps = 200
    eval_every = 50
    seed = 0

    [latent]
    dim = 100
    k = 10
    sigma = 0.1

    [net]
    hidden = 512, 512
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field

from .costs import KINDS, CostSpec
from .data import data_dir, load_idx, preprocess, ring_of_gaussians

# dotted key -> parser
_SCHEMA = {
    "data.kind": str,
    "data.n_modes": int,
    "data.n_points": int,
    "data.radius": float,
    "data.sigma": float,
    "data.seed": int,
    "data.images": str,
    "data.labels": str,
    "data.subset": int,
    "data.size": int,
    "data.shuffle_seed": int,
    "cost.kind": str,
    "cost.scale": str,
    "cost.assigner_kind": str,
    "train.lr": float,
    "train.m": int,
    "train.n_critic": int,
    "train.max_steps": int,
    "train.eval_every": int,
    "train.seed": int,
    "train.fresh_reassign": "bool",
    "train.eval_k": int,
    "train.eval_samples": int,
    "train.w1_every": int,
    "train.w1_k": int,
    "train.patience": int,
    "train.min_improvement": float,
    "train.chunk_size": int,
    "train.workers": int,
    "train.record_wall_time": "bool",
    "latent.dim": int,
    "latent.k": int,
    "latent.sigma": float,
    "net.hidden": "ints",
    "net.generator_head": str,
}

_TRAIN_FIELDS = {
    "train.lr": "lr", "train.m": "m", "train.n_critic": "n_critic",
    "train.max_steps": "max_steps", "train.eval_every": "eval_every", "train.seed": "seed",
    "train.fresh_reassign": "fresh_reassign", "train.eval_k": "eval_k",
    "train.eval_samples": "eval_samples", "train.w1_every": "w1_every", "train.w1_k": "w1_k",
    "train.patience": "patience", "train.min_improvement": "min_improvement",
    "train.chunk_size": "chunk_size", "train.workers": "workers",
    "train.record_wall_time": "record_wall_time",
    "latent.dim": "latent_dim", "latent.k": "latent_components", "latent.sigma": "latent_sigma",
    "net.hidden": "hidden", "net.generator_head": "generator_head",
}


class ConfigError(ValueError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def get(self, key, default=None):
        return self.values.get(key, default)


def _parse(key, raw):
    kind = _SCHEMA[key]
    try:
        if kind == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind == "ints":
            return tuple(int(v) for v in raw.replace(",", " ").split())
        return kind(raw.strip())
    except ValueError as exc:
        raise ConfigError(key, str(exc)) from None


def parse_config_text(text):
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("<file>", str(exc)) from None
    values = {}
    for section in parser.sections():
        for name, raw in parser.items(section):
            key = f"{section}.{name}"
            if key not in _SCHEMA:
                raise ConfigError(key, "unknown configuration key")
            values[key] = _parse(key, raw)
    return RunConfig(values)


def load_config(path):
    with open(path) as fh:
        return parse_config_text(fh.read())


def set_value(cfg, key, raw):
    """Apply a command-line override (takes precedence over the file)."""
    if key not in _SCHEMA:
        raise ConfigError(key, "unknown configuration key")
    cfg.values[key] = _parse(key, str(raw))


def build_dataset(cfg):
    kind = cfg.get("data.kind", "ring")
    if kind == "ring":
        return ring_of_gaussians(
            n_modes=cfg.get("data.n_modes", 10),
            n_points=cfg.get("data.n_points", 2000),
            radius=cfg.get("data.radius", 1.0),
            sigma=cfg.get("data.sigma", 0.02),
            seed=cfg.get("data.seed", 0),
        )
    if kind == "idx":
        images = cfg.get("data.images")
        if images is None:
            raise ConfigError("data.images", "required for data.kind = idx")
        root = data_dir()
        images = _resolve(images, root)
        labels = cfg.get("data.labels")
        ds = load_idx(images, _resolve(labels, root) if labels else None)
        subset = cfg.get("data.subset", min(5000, ds.m))
        size = cfg.get("data.size", 32)
        return preprocess(ds, subset=subset, target=(size, size), seed=cfg.get("data.shuffle_seed", 0))
    raise ConfigError("data.kind", f"expected 'ring' or 'idx', got {kind!r}")


def _resolve(path, root):
    from pathlib import Path

    p = Path(path)
    if not p.is_absolute() and not p.exists():
        p = root / p
    return p


def _cost_spec(kind, dataset, key):
    if kind not in KINDS:
        raise ConfigError(key, f"unknown cost kind {kind!r}")
    image_shape = dataset.image_shape
    if kind in ("ssim_cost", "psnr_cost") and image_shape is None:
        raise ConfigError(key, f"{kind} needs an image dataset")
    return CostSpec(kind, 1.0, image_shape)


def build_train_config(cfg, dataset):
    from .trainer import TrainConfig

    kwargs = {}
    for key, name in _TRAIN_FIELDS.items():
        if key in cfg.values:
            kwargs[name] = cfg.values[key]
    if "generator_head" not in kwargs:
        kwargs["generator_head"] = "sigmoid" if dataset.image_shape is not None else "identity"
    if "latent_dim" not in kwargs and dataset.image_shape is not None:
        kwargs["latent_dim"] = 100
    kind = cfg.get("cost.kind", "squared_euclidean")
    spec = _cost_spec(kind, dataset, "cost.kind")
    asg_kind = cfg.get("cost.assigner_kind")
    asg = _cost_spec(asg_kind, dataset, "cost.assigner_kind") if asg_kind else None
    scale = cfg.get("cost.scale", "auto").strip().lower()
    auto = scale == "auto"
    if not auto:
        try:
            value = float(scale)
            spec = spec.with_scale(value)
            asg = asg.with_scale(value) if asg is not None else None
        except ValueError as exc:
            raise ConfigError("cost.scale", str(exc)) from None
    try:
        return TrainConfig(cost=spec, assigner_cost=asg, auto_scale=auto, **kwargs)
    except ValueError as exc:
        raise ConfigError("train", str(exc)) from None
