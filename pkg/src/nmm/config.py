"""YAML configuration files: sections model / optimizer / task / augment / train.

Every key is validated before any model is built; unknown keys are errors.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import yaml

from .errors import ConfigError
from .mixture import ModelConfig
from .train import OptimizerConfig, SpecAugmentConfig, SyntheticTask, TrainConfig

# file key -> dataclass attribute
MODEL_KEYS = {
    "C": "channels", "R": "repeats", "k": "kernel_size", "towers": "towers",
    "vocab": "vocab_size", "feature_dim": "feature_dim", "tower_dropout_p": "tower_dropout_p",
    "dropout_p": "dropout_p", "se_reduction": "se_reduction",
}
TASK_KEYS = ("frames_per_symbol", "noise_std", "min_len", "max_len", "seed")


@dataclass(frozen=True)
class FullConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    task_options: dict = field(default_factory=dict)
    augment: SpecAugmentConfig = field(default_factory=SpecAugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        # canonical form: every task option explicit, so equal configs compare equal
        defaults = {f.name: f.default for f in fields(SyntheticTask) if f.name in TASK_KEYS}
        object.__setattr__(self, "task_options", {**defaults, **self.task_options})

    @property
    def task(self):
        return SyntheticTask(vocab_size=self.model.vocab_size, feature_dim=self.model.feature_dim,
                             **self.task_options)


def _check_type(section, key, value, default):
    where = f"{section}.{key}"
    if isinstance(value, bool):
        raise ConfigError(f"expected a number, got {value!r}", where)
    if isinstance(default, tuple):
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"expected a list of integers, got {value!r}", where)
        return tuple(value)
    if isinstance(default, int):
        if not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", where)
    elif isinstance(default, float):
        if not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", where)
        value = float(value)
    return value


def _build(section, cls, raw, keymap):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("expected a mapping", section)
    defaults = {f.name: f.default for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in keymap:
            raise ConfigError(f"unknown key (allowed: {', '.join(keymap)})", f"{section}.{key}")
        attr = keymap[key]
        kwargs[attr] = _check_type(section, key, value, defaults[attr])
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        reverse = {v: k for k, v in keymap.items()}
        name = reverse.get(exc.field, exc.field)
        raise ConfigError(str(exc).split(": ", 1)[-1], f"{section}.{name}") from None


def parse_config(text):
    """Build a :class:`FullConfig` from YAML text."""
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"not valid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a mapping")
    sections = {"model", "optimizer", "task", "augment", "train"}
    for name in raw:
        if name not in sections:
            raise ConfigError(f"unknown section (allowed: {', '.join(sorted(sections))})", name)

    identity = lambda cls: {f.name: f.name for f in fields(cls)}  # noqa: E731
    model = _build("model", ModelConfig, raw.get("model"), MODEL_KEYS)
    optimizer = _build("optimizer", OptimizerConfig, raw.get("optimizer"), identity(OptimizerConfig))
    task = _build("task", SyntheticTask, raw.get("task"), {k: k for k in TASK_KEYS})
    augment = _build("augment", SpecAugmentConfig, raw.get("augment"), identity(SpecAugmentConfig))
    train = _build("train", TrainConfig, raw.get("train"), identity(TrainConfig))
    task_options = {k: getattr(task, k) for k in TASK_KEYS}
    cfg = FullConfig(model, optimizer, task_options, augment, train)
    cfg.task  # noqa: B018 - validates the combined task
    return cfg


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def dump_config(cfg):
    """Canonical YAML text; ``parse_config(dump_config(c)) == c``."""
    m = cfg.model
    data = {
        "model": {key: (list(getattr(m, attr)) if attr == "towers" else getattr(m, attr))
                  for key, attr in MODEL_KEYS.items()},
        "optimizer": {f.name: getattr(cfg.optimizer, f.name) for f in fields(OptimizerConfig)},
        "task": dict(cfg.task_options),
        "augment": {f.name: getattr(cfg.augment, f.name) for f in fields(SpecAugmentConfig)},
        "train": {f.name: getattr(cfg.train, f.name) for f in fields(TrainConfig)},
    }
    return yaml.safe_dump(data, sort_keys=False, default_flow_style=None)
