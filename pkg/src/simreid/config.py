"""Run configuration: flat ``key = value`` files with section headers.

The CLI resolves a RunConfig from defaults, then an optional config file,
then command-line flags, and writes the fully resolved result next to
every run's artifacts as ``run_manifest.ini``.  Re-running a command from
that file reproduces the run byte for byte, because every random choice
downstream flows from the recorded seed.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, fields

from . import data as data_mod
from . import optim
from .losses import LossConfig
from .pipeline import ModelSpec


class ConfigError(ValueError):
    """A config value failed validation; the offending field is named."""


@dataclass
class RunConfig:
    # run
    command: str = ""
    seed: int = 0
    dataset: str = ""
    out_dir: str = "runs/out"
    species_tag: str = ""
    image_root: str = ""
    checkpoint: str = ""
    # model
    hidden_dims: str = "64"
    embedding_dim: int = 128
    l2_normalize: bool = False
    # loss
    loss_kind: str = "triplet"
    margin: float = 1.0
    squared_distances: bool = True
    # optim
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    decay_per_epoch: float = 0.02
    decay_mode: str = "lr"
    epochs: int = 100
    batch_size: int = 32
    early_stop_patience: int = -1  # -1 disables early stopping
    # sampler
    individuals_per_batch: int = 8
    images_per_individual: int = 4
    # split
    train_ratio: float = 0.7
    val_ratio: float = 0.1
    test_ratio: float = 0.2
    folds: int = 5
    fold: int = 0
    # augment
    augment_enabled: bool = False
    augment_probability: float = 0.5
    shift_max_pixels: int = 2
    rotate_max_degrees: float = 15.0
    channel_noise_std: float = 10.0
    pixel_noise_std: float = 5.0
    dropout_rate: float = 0.05
    # eval
    repetitions: int = 1000
    ap_mode: str = "ap"
    # census
    census_threshold: float = -1.0  # < 0 means "calibrate instead"
    calibrate_dataset: str = ""
    max_exemplars: int = 5
    ids_are_truth: bool = True
    # synth
    synth_individuals: int = 30
    synth_images: int = 20
    feature_dim: int = 16
    cluster_spread: float = 1.0
    inter_cluster_distance: float = 6.0
    # bench
    bench_seeds: int = 5
    bench_base_seed: int = 1
    bench_train_individuals: int = 20
    bench_test_individuals: int = 10
    bench_images: int = 25
    bench_epochs: int = 30
    bench_spread: float = 1.0
    bench_separation: float = 3.0
    bench_repetitions: int = 1000


SECTIONS: dict[str, list[str]] = {
    "run": ["command", "seed", "dataset", "out_dir", "species_tag", "image_root", "checkpoint"],
    "model": ["hidden_dims", "embedding_dim", "l2_normalize"],
    "loss": ["loss_kind", "margin", "squared_distances"],
    "optim": [
        "lr", "beta1", "beta2", "epsilon", "decay_per_epoch", "decay_mode",
        "epochs", "batch_size", "early_stop_patience",
    ],
    "sampler": ["individuals_per_batch", "images_per_individual"],
    "split": ["train_ratio", "val_ratio", "test_ratio", "folds", "fold"],
    "augment": [
        "augment_enabled", "augment_probability", "shift_max_pixels",
        "rotate_max_degrees", "channel_noise_std", "pixel_noise_std", "dropout_rate",
    ],
    "eval": ["repetitions", "ap_mode"],
    "census": ["census_threshold", "calibrate_dataset", "max_exemplars", "ids_are_truth"],
    "synth": [
        "synth_individuals", "synth_images", "feature_dim",
        "cluster_spread", "inter_cluster_distance",
    ],
    "bench": [
        "bench_seeds", "bench_base_seed", "bench_train_individuals",
        "bench_test_individuals", "bench_images", "bench_epochs",
        "bench_spread", "bench_separation", "bench_repetitions",
    ],
}

_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    raw = raw.strip()
    try:
        if kind == "bool":
            lowered = raw.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from None


def to_ini(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser()
    for section, names in SECTIONS.items():
        parser[section] = {}
        for name in names:
            value = getattr(cfg, name)
            parser[section][name] = str(value).lower() if isinstance(value, bool) else str(value)
    out = io.StringIO()
    parser.write(out)
    return out.getvalue()


def overrides_from_ini(text: str) -> dict:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"bad config file: {exc}") from None
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for name, raw in parser[section].items():
            if name not in SECTIONS[section]:
                raise ConfigError(f"unknown key {name!r} in section [{section}]")
            values[name] = _coerce(name, raw)
    return values


def resolve(file_text: str | None, flag_overrides: dict) -> RunConfig:
    """defaults <- config file <- flags (only flags actually given)."""
    cfg = RunConfig()
    if file_text is not None:
        for name, value in overrides_from_ini(file_text).items():
            setattr(cfg, name, value)
    for name, value in flag_overrides.items():
        if value is not None:
            setattr(cfg, name, _coerce(name, str(value)) if isinstance(value, str) else value)
    return cfg


def parse_hidden_dims(raw: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(tok) for tok in raw.split(",") if tok.strip() != "")
    except ValueError:
        raise ConfigError(f"hidden_dims: not a comma-separated int list: {raw!r}") from None
    if not dims:
        raise ConfigError("hidden_dims: need at least one hidden layer size")
    return dims


# --- builders: validated core config objects from a RunConfig -------------


def split_config(cfg: RunConfig) -> data_mod.SplitConfig:
    try:
        return data_mod.SplitConfig(
            (cfg.train_ratio, cfg.val_ratio, cfg.test_ratio), cfg.folds, cfg.seed
        )
    except ValueError as exc:
        raise ConfigError(f"split: {exc}") from None


def loss_config(cfg: RunConfig) -> LossConfig:
    try:
        return LossConfig(cfg.margin, cfg.squared_distances)
    except ValueError as exc:
        raise ConfigError(f"loss: {exc}") from None


def optim_config(cfg: RunConfig) -> optim.OptimConfig:
    try:
        return optim.OptimConfig(
            lr=cfg.lr,
            beta1=cfg.beta1,
            beta2=cfg.beta2,
            epsilon=cfg.epsilon,
            decay_per_epoch=cfg.decay_per_epoch,
            decay_mode=cfg.decay_mode,
            epochs=cfg.epochs,
            batch_size=cfg.batch_size,
        )
    except ValueError as exc:
        raise ConfigError(f"optim: {exc}") from None


def sampler_config(cfg: RunConfig) -> optim.SamplerConfig:
    try:
        return optim.SamplerConfig(cfg.individuals_per_batch, cfg.images_per_individual)
    except ValueError as exc:
        raise ConfigError(f"sampler: {exc}") from None


def model_spec(cfg: RunConfig) -> ModelSpec:
    return ModelSpec(parse_hidden_dims(cfg.hidden_dims), cfg.embedding_dim, cfg.l2_normalize)


def augment_config(cfg: RunConfig) -> data_mod.AugmentConfig | None:
    if not cfg.augment_enabled:
        return None
    p = cfg.augment_probability
    try:
        return data_mod.AugmentConfig(
            mirror_prob=p,
            shift_prob=p,
            shift_max_pixels=cfg.shift_max_pixels,
            rotate_prob=p,
            rotate_max_degrees=cfg.rotate_max_degrees,
            channel_noise_prob=p,
            channel_noise_std=cfg.channel_noise_std,
            pixel_noise_prob=p,
            pixel_noise_std=cfg.pixel_noise_std,
            blur_prob=p,
            dropout_prob=p,
            dropout_rate=cfg.dropout_rate,
        )
    except ValueError as exc:
        raise ConfigError(f"augment: {exc}") from None
