"""Configuration schema, defaults, validation and YAML round-trip.

The file has five sections::

    data:      train_dir, test_dir, image_size [H, W], limit
    model:     message_length, channels, encoder_blocks, encoder_post_blocks,
               decoder_blocks, decoder_downsample, discriminator_blocks, bn_momentum
    attacks:   list of {kind, min, max, step} and/or {kind, fixed}
    training:  batch_size, subset_sizes, lr_encoder, lr_decoder, lr_discriminator,
               lambda_I, lambda_A, epochs, mode, optimizer, search, replay_draws,
               seed, checkpoint_every, early_stop_window, early_stop_tol
    eval:      seed, batch_size, true_jpeg, extend_grids

Any omitted key takes the default of the matching dataclass field.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .core import AttackSpec, ConfigError, LossWeights, SeverityGrid

MODES = ("worst_case", "fixed_severity")
OPTIMIZERS = ("sgd", "adam")
SEARCH_MODES = ("batch", "per_image")

# Training grids and baseline intensities for each distortion family.
TRAINING_GRIDS = {
    "crop": SeverityGrid(0.1, 0.8, 0.1),
    "cropout": SeverityGrid(0.3, 0.9, 0.1),
    "dropout": SeverityGrid(0.3, 0.9, 0.1),
    "gaussian_blur": SeverityGrid(1.0, 5.0, 1.0),
    "jpeg": SeverityGrid(50.0, 100.0, 10.0),
}
BASELINE_SEVERITIES = {
    "crop": 0.3,
    "cropout": 0.3,
    "dropout": 0.3,
    "gaussian_blur": 2.0,
    "jpeg": None,  # the baseline has no JPEG intensity
}


def default_attacks(kinds=None) -> list[AttackSpec]:
    kinds = kinds or ["identity", "crop", "cropout", "dropout", "gaussian_blur", "jpeg"]
    out = []
    for kind in kinds:
        if kind == "identity":
            out.append(AttackSpec("identity"))
        else:
            out.append(AttackSpec(kind, TRAINING_GRIDS[kind], BASELINE_SEVERITIES[kind]))
    return out


def baseline_attacks(attacks: list[AttackSpec]) -> list[AttackSpec]:
    """Attacks usable in fixed_severity mode; families without a fixed intensity are dropped."""
    return [a for a in attacks if a.kind == "identity" or a.fixed is not None
            or (a.grid is not None and len(a.grid) == 1)]


@dataclass
class DataConfig:
    train_dir: Optional[str] = None
    test_dir: Optional[str] = None
    image_size: tuple[int, int] = (128, 128)
    limit: Optional[int] = None


@dataclass
class ArchConfig:
    message_length: int = 30
    channels: int = 64
    encoder_blocks: int = 4
    encoder_post_blocks: int = 2
    decoder_blocks: int = 7
    decoder_downsample: int = 0
    discriminator_blocks: int = 3
    bn_momentum: float = 0.1


@dataclass
class TrainingConfig:
    batch_size: int = 12
    subset_sizes: Optional[list[int]] = None
    lr_encoder: float = 1e-3
    lr_decoder: float = 1e-3
    lr_discriminator: float = 1e-3
    lambda_I: float = 0.7
    lambda_A: float = 0.001
    epochs: int = 10
    mode: str = "worst_case"
    optimizer: str = "sgd"
    search: str = "batch"
    replay_draws: bool = False
    seed: int = 0
    checkpoint_every: int = 0
    early_stop_window: int = 0
    early_stop_tol: Optional[float] = None


@dataclass
class EvalConfig:
    seed: int = 1234
    batch_size: int = 32
    true_jpeg: bool = False
    extend_grids: bool = True


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    model: ArchConfig = field(default_factory=ArchConfig)
    attacks: list[AttackSpec] = field(default_factory=default_attacks)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.training.lambda_I, self.training.lambda_A)

    def subset_sizes(self) -> list[int]:
        if self.training.subset_sizes is not None:
            return list(self.training.subset_sizes)
        return equal_split(self.training.batch_size, len(self.attacks))

    def validate(self) -> "Config":
        t, m, d = self.training, self.model, self.data
        k = len(self.attacks)
        if k < 1:
            raise ConfigError("attacks", "at least one attack is required")
        if t.batch_size < k:
            raise ConfigError("training.batch_size", f"batch size {t.batch_size} < number of attacks {k}")
        sizes = self.subset_sizes()
        if len(sizes) != k:
            raise ConfigError("training.subset_sizes", f"{len(sizes)} sizes for {k} attacks")
        if any(s < 1 for s in sizes):
            raise ConfigError("training.subset_sizes", "every subset needs at least one image")
        if sum(sizes) != t.batch_size:
            raise ConfigError(
                "training.subset_sizes", f"sizes sum to {sum(sizes)}, batch size is {t.batch_size}"
            )
        if t.epochs < 0:
            raise ConfigError("training.epochs", "must be >= 0")
        if t.mode not in MODES:
            raise ConfigError("training.mode", f"must be one of {MODES}")
        if t.optimizer not in OPTIMIZERS:
            raise ConfigError("training.optimizer", f"must be one of {OPTIMIZERS}")
        if t.search not in SEARCH_MODES:
            raise ConfigError("training.search", f"must be one of {SEARCH_MODES}")
        for name in ("lr_encoder", "lr_decoder", "lr_discriminator"):
            v = getattr(t, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"training.{name}", "must be finite and >= 0")
        self.weights  # validates lambdas
        if t.mode == "fixed_severity":
            for a in self.attacks:
                try:
                    a.fixed_severity()
                except ConfigError as e:
                    raise ConfigError(f"attacks.{a.kind}.fixed", str(e)) from None
        if m.message_length < 1:
            raise ConfigError("model.message_length", "must be >= 1")
        for name in ("channels", "encoder_blocks", "decoder_blocks", "discriminator_blocks"):
            if getattr(m, name) < 1:
                raise ConfigError(f"model.{name}", "must be >= 1")
        if m.encoder_post_blocks < 0 or m.decoder_downsample < 0:
            raise ConfigError("model", "block counts must be >= 0")
        if m.decoder_downsample > m.decoder_blocks:
            raise ConfigError("model.decoder_downsample", "cannot exceed decoder_blocks")
        h, w = d.image_size
        if h < 16 or w < 16 or h % 8 or w % 8:
            raise ConfigError("data.image_size", "H and W must be >= 16 and multiples of 8")
        if d.limit is not None and d.limit < 1:
            raise ConfigError("data.limit", "must be >= 1")
        return self


def equal_split(b: int, k: int) -> list[int]:
    """Split ``b`` into ``k`` near-equal sizes, remainder to the earliest subsets."""
    base, rem = divmod(b, k)
    return [base + (1 if i < rem else 0) for i in range(k)]


# --- (de)serialization ---------------------------------------------------------------

_SECTIONS = {"data": DataConfig, "model": ArchConfig, "training": TrainingConfig, "eval": EvalConfig}


def _coerce(path: str, value: Any, typ: Any):
    """Minimal type check for the scalar field annotations used above."""
    t = str(typ)
    optional = t.startswith("Optional[")
    if value is None:
        if optional:
            return None
        raise ConfigError(path, "may not be null")
    if optional:
        t = t[len("Optional["):-1]
    if t == "bool":
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if t == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if t == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if t == "str":
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if t == "tuple[int, int]":
        if not isinstance(value, (list, tuple)) or len(value) != 2 or not all(
            isinstance(v, int) and not isinstance(v, bool) for v in value
        ):
            raise ConfigError(path, f"expected [H, W] integers, got {value!r}")
        return (value[0], value[1])
    if t == "list[int]":
        if not isinstance(value, list) or not all(
            isinstance(v, int) and not isinstance(v, bool) for v in value
        ):
            raise ConfigError(path, f"expected a list of integers, got {value!r}")
        return list(value)
    raise AssertionError(f"unhandled annotation {t}")


def _section_from_dict(name: str, cls, raw: Any):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(name, "expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in fields:
            raise ConfigError(f"{name}.{key}", "unknown key")
        kwargs[key] = _coerce(f"{name}.{key}", value, fields[key].type)
    return cls(**kwargs)


def attack_from_dict(raw: Any, path: str = "attacks") -> AttackSpec:
    if isinstance(raw, str):
        if raw == "identity":
            return AttackSpec("identity")
        if raw in TRAINING_GRIDS:
            return default_attacks([raw])[0]
        raise ConfigError(path, f"unknown attack kind {raw!r}")
    if not isinstance(raw, dict) or "kind" not in raw:
        raise ConfigError(path, "attack entries need a 'kind'")
    unknown = set(raw) - {"kind", "min", "max", "step", "fixed"}
    if unknown:
        raise ConfigError(f"{path}.{sorted(unknown)[0]}", "unknown key")
    kind = raw["kind"]
    grid = None
    if any(k in raw for k in ("min", "max", "step")):
        try:
            grid = SeverityGrid(
                _coerce(f"{path}.min", raw.get("min"), "float"),
                _coerce(f"{path}.max", raw.get("max"), "float"),
                _coerce(f"{path}.step", raw.get("step", 1.0), "float"),
            )
        except ConfigError as e:
            raise ConfigError(f"{path}.{e.field}", str(e)) from None
    fixed = raw.get("fixed")
    if fixed is not None:
        fixed = _coerce(f"{path}.fixed", fixed, "float")
    try:
        return AttackSpec(kind, grid, fixed)
    except ConfigError as e:
        raise ConfigError(path, str(e)) from None


def attack_to_dict(a: AttackSpec) -> dict:
    out: dict[str, Any] = {"kind": a.kind}
    if a.grid is not None:
        out.update(min=a.grid.min, max=a.grid.max, step=a.grid.step)
    if a.fixed is not None:
        out["fixed"] = a.fixed
    return out


def config_from_dict(raw: Any) -> Config:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "expected a mapping with sections data/model/attacks/training/eval")
    unknown = set(raw) - set(_SECTIONS) - {"attacks"}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown section")
    sections = {name: _section_from_dict(name, cls, raw.get(name)) for name, cls in _SECTIONS.items()}
    if "attacks" in raw:
        if not isinstance(raw["attacks"], list):
            raise ConfigError("attacks", "expected a list")
        attacks = [attack_from_dict(a, f"attacks[{i}]") for i, a in enumerate(raw["attacks"])]
    else:
        attacks = default_attacks()
    return Config(attacks=attacks, **sections).validate()


def config_to_dict(cfg: Config) -> dict:
    out = {}
    for name in _SECTIONS:
        section = dataclasses.asdict(getattr(cfg, name))
        if name == "data":
            section["image_size"] = list(section["image_size"])
        out[name] = section
    out["attacks"] = [attack_to_dict(a) for a in cfg.attacks]
    return out


def load_config(path) -> Config:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("<file>", f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError("<file>", f"cannot parse {path}: {e}") from None
    return config_from_dict(raw)


def dump_config(cfg: Config) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def save_config(cfg: Config, path) -> None:
    Path(path).write_text(dump_config(cfg))


def apply_overrides(cfg: Config, overrides: dict[str, Any]) -> Config:
    """Return a new validated config with dotted-key overrides, e.g. ``{"training.epochs": 3}``."""
    raw = config_to_dict(cfg)
    for key, value in overrides.items():
        if key == "attacks":
            raw["attacks"] = value
            continue
        section, _, name = key.partition(".")
        if section not in _SECTIONS or not name:
            raise ConfigError(key, "overrides must look like section.key")
        raw[section][name] = value
    return config_from_dict(raw)
