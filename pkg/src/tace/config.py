"""INI-style run configuration with sections data, model, loss, optimizer and output.

Every key is validated against a fixed schema; unknown sections or keys are
errors. ``section.key=value`` overrides are applied on top of the file.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .embeddings import AttributeSpec
from .exceptions import ConfigurationError
from .extxyz import ATOMIC_NUMBERS
from .model import ModelConfig
from .training import LossConfig, TrainConfig


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on", "t"):
        return True
    if low in ("0", "false", "no", "off", "f"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ints(v: str) -> Tuple[int, ...]:
    return tuple(int(x) for x in v.replace(",", " ").split())


def _names(v: str) -> Tuple[str, ...]:
    return tuple(x for x in v.replace(",", " ").split())


def _species(v: str) -> Tuple[int, ...]:
    out = []
    for tok in _names(v):
        out.append(int(tok) if tok.isdigit() else ATOMIC_NUMBERS[tok])
    return tuple(out)


def _attributes(v: str) -> Tuple[AttributeSpec, ...]:
    """``name:kind[:classes]`` entries, e.g. ``fidelity:discrete:2, total_charge:continuous``."""
    out = []
    for tok in _names(v):
        parts = tok.split(":")
        name, kind = parts[0], parts[1] if len(parts) > 1 else "continuous"
        classes = int(parts[2]) if len(parts) > 2 else 0
        out.append(AttributeSpec(name, kind, classes))
    return tuple(out)


def _opt_float(v: str) -> Optional[float]:
    return None if v.strip().lower() in ("", "auto", "none") else float(v)


def _opt_str(v: str) -> Optional[str]:
    return v.strip() or None


SCHEMA: Dict[str, Dict[str, Callable[[str], object]]] = {
    "data": {"train": _opt_str, "valid": _opt_str, "valid_fraction": float},
    "model": {
        "species": _species,
        "l_max": int,
        "edge_l_max": int,
        "channels": int,
        "layers": int,
        "correlation": int,
        "path_mode": str,
        "weight_mode": str,
        "readout_hidden": _ints,
        "n_basis": int,
        "cutoff": float,
        "envelope_exponent": int,
        "bessel_order": int,
        "radial_hidden": _ints,
        "invariant_attributes": _attributes,
        "equivariant_attributes": _names,
        "les": _bool,
        "les_sigma": float,
        "les_kcut": float,
        "charge_head": str,
        "dipole": _bool,
        "polarizability": _bool,
        "zero_init_readout": _bool,
        "seed": int,
    },
    "loss": {name: _opt_float for name in LossConfig.__dataclass_fields__},
    "optimizer": {
        "epochs": int,
        "batch_size": int,
        "lr": float,
        "beta1": float,
        "beta2": float,
        "amsgrad": _bool,
        "patience": int,
        "factor": float,
        "min_lr": float,
        "seed": int,
    },
    "output": {
        "directory": str,
        "checkpoint": str,
        "metrics": str,
        "threads": int,
        "deterministic": _bool,
    },
}


@dataclass
class RunConfig:
    train_path: Optional[str] = None
    valid_path: Optional[str] = None
    valid_fraction: float = 0.0
    model: dict = field(default_factory=dict)
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: dict = field(default_factory=dict)
    directory: str = "."
    checkpoint: str = "model.pt"
    metrics: str = "metrics.csv"
    threads: int = 0
    deterministic: bool = False

    def model_config(self, species: Optional[Sequence[int]] = None) -> ModelConfig:
        values = dict(self.model)
        if "species" not in values:
            if not species:
                raise ConfigurationError("model.species is not set and could not be inferred from the data")
            values["species"] = tuple(sorted(set(int(z) for z in species)))
        return ModelConfig(**values)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            valid_fraction=self.valid_fraction,
            metrics_path=os.path.join(self.directory, self.metrics),
            checkpoint_path=os.path.join(self.directory, self.checkpoint),
            **self.optimizer,
        )


def _raw_sections(text: str) -> Dict[str, Dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"cannot parse configuration: {exc}") from None
    return {s: dict(parser.items(s)) for s in parser.sections()}


def parse_override(item: str) -> Tuple[str, str, str]:
    key, sep, value = item.partition("=")
    section, dot, name = key.strip().partition(".")
    if not sep or not dot or not section or not name:
        raise ConfigurationError(f"override {item!r} must look like section.key=value")
    return section, name, value.strip()


def build_run_config(text: str = "", overrides: Sequence[str] = (), base_dir: str = ".") -> RunConfig:
    raw = _raw_sections(text)
    for item in overrides:
        section, name, value = parse_override(item)
        raw.setdefault(section, {})[name] = value
    parsed: Dict[str, Dict[str, object]] = {}
    errors: List[str] = []
    for section, items in raw.items():
        if section not in SCHEMA:
            errors.append(f"unknown section [{section}]")
            continue
        for name, value in items.items():
            conv = SCHEMA[section].get(name)
            if conv is None:
                errors.append(f"unknown key {section}.{name}")
                continue
            try:
                parsed.setdefault(section, {})[name] = conv(value)
            except (ValueError, KeyError) as exc:
                errors.append(f"bad value for {section}.{name}: {value!r} ({exc})")
    if errors:
        raise ConfigurationError("; ".join(errors))

    data = parsed.get("data", {})
    out = parsed.get("output", {})

    def resolve(p):
        return p if p is None or os.path.isabs(p) else os.path.join(base_dir, p)

    return RunConfig(
        train_path=resolve(data.get("train")),
        valid_path=resolve(data.get("valid")),
        valid_fraction=float(data.get("valid_fraction", 0.0)),
        model=parsed.get("model", {}),
        loss=LossConfig(**parsed.get("loss", {})),
        optimizer=parsed.get("optimizer", {}),
        directory=resolve(out.get("directory", ".")),
        checkpoint=out.get("checkpoint", "model.pt"),
        metrics=out.get("metrics", "metrics.csv"),
        threads=int(out.get("threads", 0)),
        deterministic=bool(out.get("deterministic", False)),
    )


def load_run_config(path, overrides: Sequence[str] = ()) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    return build_run_config(text, overrides, base_dir=os.path.dirname(os.path.abspath(path)))
