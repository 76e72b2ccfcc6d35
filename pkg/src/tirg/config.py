"""Run configuration: one merged, fully-resolved view of every setting a
pipeline stage depends on.

Config files are UTF-8 INI documents with four sections::

    [dataset]           scene/query generation (counts, seed, canvas)
    [model]             encoders and the composition strategy
    [train]             optimizer, loss, batching, eval cadence
    [eval]              recall cutoffs

Every key has a default, so the empty document is a valid config; command-line
flags override file values. Unknown sections or keys are hard errors rather
than warnings so a typo cannot silently change an experiment. The resolved
config is serialized (render_config) next to every output directory for
provenance, and that snapshot parses back to an identical RunConfig.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, Mapping, Optional, Tuple, Union

from .css import DatasetConfig
from .metric_learning import TrainConfig
from .model import ModelConfig

SNAPSHOT_NAME = "config.resolved.ini"


class ConfigError(ValueError):
    """Malformed config document, unknown key, or invalid value."""


# ---------------------------------------------------------------------------
# value codecs: parse from INI strings, format back for the snapshot
# ---------------------------------------------------------------------------


def _parse_int(text: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"expected an integer, got {text!r}") from None


def _parse_float(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"expected a number, got {text!r}") from None


def _parse_str(text: str) -> str:
    return text.strip()


def _parse_opt_int(text: str) -> Optional[int]:
    text = text.strip()
    if text == "" or text.lower() == "none":
        return None
    return _parse_int(text)


def _parse_int_tuple(text: str) -> Tuple[int, ...]:
    parts = [p for p in (piece.strip() for piece in text.split(",")) if p]
    if not parts:
        raise ConfigError(f"expected a comma-separated integer list, got {text!r}")
    return tuple(_parse_int(p) for p in parts)


def _format(value: object) -> str:
    if value is None:
        return ""
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


_PARSERS = {
    "int": _parse_int,
    "float": _parse_float,
    "str": _parse_str,
    "opt_int": _parse_opt_int,
    "int_tuple": _parse_int_tuple,
}

# section -> key -> parser name. canvas_px lives under [dataset] only and is
# copied into the model so renders and the encoder can never disagree.
_SCHEMA: Dict[str, Dict[str, str]] = {
    "dataset": {
        "n_base": "int",
        "n_queries": "int",
        "seed": "int",
        "canvas_px": "int",
        "test_n_base": "opt_int",
        "test_n_queries": "opt_int",
    },
    "model": {
        "strategy": "str",
        "layer_mode": "str",
        "image_channels": "int_tuple",
        "embed_dim": "int",
        "text_embed_dim": "int",
        "text_hidden_dim": "int",
        "compose_hidden_dim": "opt_int",
        "dropout": "float",
        "input_center": "float",
    },
    "train": {
        "iterations": "int",
        "learning_rate": "float",
        "momentum": "float",
        "batch_size": "int",
        "k": "int",
        "kernel": "str",
        "m": "opt_int",
        "seed": "int",
        "eval_every": "int",
        "eval_queries": "int",
    },
    "eval": {
        "ks": "int_tuple",
    },
}

_DEFAULTS: Dict[str, Dict[str, object]] = {
    "dataset": {
        "n_base": 200,
        "n_queries": 2000,
        "seed": 0,
        "canvas_px": 48,
        "test_n_base": 100,
        "test_n_queries": 1000,
    },
    "model": {
        "strategy": "tirg",
        "layer_mode": "fc",
        "image_channels": (16, 32, 64),
        "embed_dim": 64,
        "text_embed_dim": 32,
        "text_hidden_dim": 64,
        "compose_hidden_dim": 512,
        "dropout": 0.0,
        "input_center": ModelConfig().input_center,
    },
    "train": {
        "iterations": 3000,
        "learning_rate": 0.01,
        "momentum": 0.0,
        "batch_size": 16,
        "k": 2,
        "kernel": "dot",
        "m": None,
        "seed": 0,
        "eval_every": 500,
        "eval_queries": 200,
    },
    "eval": {
        "ks": (1, 5, 10, 50),
    },
}


@dataclass(frozen=True)
class RunConfig:
    """Fully-resolved settings for a run: dataset, model+training, recall cutoffs.

    ``train.model`` carries the model settings, so ``config.train`` alone
    determines a training run on a given manifest.
    """

    dataset: DatasetConfig
    train: TrainConfig
    eval_ks: Tuple[int, ...] = (1, 5, 10, 50)

    @property
    def model(self) -> ModelConfig:
        return self.train.model

    def with_overrides(self, overrides: Mapping[str, str]) -> "RunConfig":
        """A copy with dotted ``section.key`` -> raw-string overrides applied."""
        return _build(_merge(_to_table(self), overrides))


def _to_table(config: RunConfig) -> Dict[str, Dict[str, object]]:
    table: Dict[str, Dict[str, object]] = {}
    table["dataset"] = {f.name: getattr(config.dataset, f.name)
                        for f in fields(DatasetConfig)}
    table["model"] = {key: getattr(config.model, key) for key in _SCHEMA["model"]}
    table["train"] = {key: getattr(config.train, key) for key in _SCHEMA["train"]}
    table["eval"] = {"ks": config.eval_ks}
    return table


def _merge(table: Dict[str, Dict[str, object]],
           overrides: Mapping[str, str]) -> Dict[str, Dict[str, object]]:
    merged = {section: dict(values) for section, values in table.items()}
    for dotted, raw in overrides.items():
        section, _, key = dotted.partition(".")
        if section not in _SCHEMA or not key:
            raise ConfigError(f"unknown setting {dotted!r}; use section.key, "
                              f"sections: {', '.join(_SCHEMA)}")
        if key not in _SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r} in section [{section}]; "
                              f"valid keys: {', '.join(_SCHEMA[section])}")
        try:
            merged[section][key] = _PARSERS[_SCHEMA[section][key]](raw)
        except ConfigError as exc:
            raise ConfigError(f"{dotted}: {exc}") from None
    return merged


def _build(table: Dict[str, Dict[str, object]]) -> RunConfig:
    try:
        dataset = DatasetConfig(**table["dataset"])
        model = ModelConfig(canvas_px=dataset.canvas_px, **table["model"])
        train = TrainConfig(model=model, **table["train"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    ks = table["eval"]["ks"]
    if any(k < 1 for k in ks):
        raise ConfigError(f"eval ks must be positive, got {ks}")
    return RunConfig(dataset=dataset, train=train, eval_ks=tuple(sorted(set(ks))))


def default_config() -> RunConfig:
    return _build({section: dict(values) for section, values in _DEFAULTS.items()})


def load_config(path: Union[str, Path, None] = None,
                overrides: Mapping[str, str] = {}) -> RunConfig:
    """Defaults, then the INI file at ``path`` (if given), then overrides.

    Raises ConfigError for an unreadable document, unknown sections/keys, or
    values the downstream dataclasses reject.
    """
    table = {section: dict(values) for section, values in _DEFAULTS.items()}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        text = Path(path).read_text(encoding="utf-8")
        try:
            parser.read_string(text, source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in parser.sections():
            if section not in _SCHEMA:
                raise ConfigError(f"{path}: unknown section [{section}]; "
                                  f"valid sections: {', '.join(_SCHEMA)}")
            for key, raw in parser.items(section):
                if key not in _SCHEMA[section]:
                    raise ConfigError(
                        f"{path}: unknown key {key!r} in section [{section}]; "
                        f"valid keys: {', '.join(_SCHEMA[section])}")
                try:
                    table[section][key] = _PARSERS[_SCHEMA[section][key]](raw)
                except ConfigError as exc:
                    raise ConfigError(f"{path}: [{section}] {key}: {exc}") from None
    return _build(_merge(table, overrides))


def render_config(config: RunConfig) -> str:
    """Canonical INI text of a resolved config; load_config(render) round-trips."""
    table = _to_table(config)
    lines = []
    for section in _SCHEMA:
        lines.append(f"[{section}]")
        for key in _SCHEMA[section]:
            lines.append(f"{key} = {_format(table[section][key])}".rstrip())
        lines.append("")
    return "\n".join(lines)


def write_snapshot(config: RunConfig, out_dir: Union[str, Path]) -> Path:
    """Write the resolved-config snapshot into an output directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / SNAPSHOT_NAME
    path.write_text(render_config(config), encoding="utf-8")
    return path
