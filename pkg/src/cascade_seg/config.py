"""INI run configuration with strict keys and ``section.key=value`` overrides."""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field

from .engine.optim import AdadeltaConfig
from .errors import ConfigError
from .phantom import PhantomConfig
from .trainer import TrainConfig


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _opt_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none") else int(text)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _names(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


# section -> key -> parser
SCHEMA = {
    "phantom": {
        "dims": _ints, "n_channels": int, "n_lesions": _ints, "lesion_radius": _ints,
        "lesion_contrast": float, "noise_sigma": float, "rng_seed": int, "voxel_size": _floats,
    },
    "train": {
        "patch_size": int, "max_epochs": int, "early_stop_patience": int, "batch_size": int,
        "validation_fraction": float, "flair_threshold": float, "augmentation": _bool,
        "rng_seed": int, "max_patches_per_class": _opt_int, "dropout": float,
        "adadelta_rho": float, "adadelta_epsilon": float,
    },
    "inference": {"t_bin_grid": _floats, "l_min_grid": _ints, "chunk": _opt_int},
    "evaluate": {"min_overlap": float, "roc_l_min": int},
    "data": {"channels": _names, "flair_channel": str},
    "paths": {"data_dir": str, "model_dir": str, "out_dir": str},
}


@dataclass
class RunConfig:
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    min_overlap: float = 0.0
    roc_l_min: int = 20
    paths: dict[str, str] = field(default_factory=dict)


def _parse_override(item: str) -> tuple[str, str, str]:
    key, sep, value = item.partition("=")
    section, dot, name = key.strip().partition(".")
    if not sep or not dot:
        raise ConfigError(f"override {item!r} is not of the form section.key=value")
    return section, name, value.strip()


def load_config(path=None, overrides=()) -> RunConfig:
    """Read ``path`` (optional) then apply ``section.key=value`` overrides."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if path is not None:
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
    raw: dict[str, dict[str, str]] = {s: dict(parser[s]) for s in parser.sections()}
    for item in overrides:
        section, name, value = _parse_override(item)
        raw.setdefault(section, {})[name] = value

    values: dict[str, dict] = {}
    for section, items in raw.items():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for name, text in items.items():
            if name not in SCHEMA[section]:
                raise ConfigError(f"unknown config key {section}.{name}")
            try:
                values.setdefault(section, {})[name] = SCHEMA[section][name](text)
            except ValueError as exc:
                raise ConfigError(f"bad value for {section}.{name}: {exc}") from exc
    return _build(values)


def _build(values: dict[str, dict]) -> RunConfig:
    ph, tr = dict(values.get("phantom", {})), dict(values.get("train", {}))
    inf, ev, data = values.get("inference", {}), values.get("evaluate", {}), values.get("data", {})
    rho = tr.pop("adadelta_rho", AdadeltaConfig.rho)
    eps = tr.pop("adadelta_epsilon", AdadeltaConfig.epsilon)
    try:
        for key in ("n_lesions", "lesion_radius"):
            if key in ph and len(ph[key]) != 2:
                raise ValueError(f"phantom.{key} needs two values")
        for key in ("dims", "voxel_size"):
            if key in ph and len(ph[key]) != 3:
                raise ValueError(f"phantom.{key} needs three values")
        phantom = PhantomConfig(**ph)
        extra = {}
        if "t_bin_grid" in inf:
            extra["t_bin_grid"] = inf["t_bin_grid"]
        if "l_min_grid" in inf:
            extra["l_min_grid"] = inf["l_min_grid"]
        if "chunk" in inf:
            extra["chunk"] = inf["chunk"]
        if "channels" in data:
            extra["channel_order"] = data["channels"]
        if "flair_channel" in data:
            extra["flair_channel"] = data["flair_channel"]
        train = TrainConfig(adadelta=AdadeltaConfig(rho, eps), **tr, **extra)
        grid = train.t_bin_grid
        if not grid or any(not 0 < t < 1 for t in grid):
            raise ValueError("inference.t_bin_grid values must lie in (0, 1)")
        if not train.l_min_grid or min(train.l_min_grid) < 0:
            raise ValueError("inference.l_min_grid values must be non-negative")
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(phantom, train, ev.get("min_overlap", 0.0), ev.get("roc_l_min", 20),
                     dict(values.get("paths", {})))


def config_keys() -> list[str]:
    return [f"{s}.{k}" for s, keys in SCHEMA.items() for k in keys]

