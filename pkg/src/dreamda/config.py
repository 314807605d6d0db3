"""Run configuration: nested dataclasses loaded from JSON with ``section.key=value`` overrides.

Precedence is CLI overrides > config file > defaults. Unknown sections or
keys are rejected with an error naming the offending key.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .perturb import SITES


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    name: str = "shapeset"
    resolution: int = 16
    position_jitter: float = 3.0
    noise: float = 0.05
    # small labelled set that the augmentation pipeline expands
    per_class: int = 10
    seed: int = 1
    # held-out evaluation set
    test_per_class: int = 100
    test_seed: int = 2
    # corpus the denoiser is trained on (stands in for a pretrained model)
    corpus_per_class: int = 100
    corpus_seed: int = 100


@dataclass
class DiffusionConfig:
    T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02
    ddim_steps: int = 50
    recon_steps: int = 200
    epochs: int = 40
    lr: float = 2e-3
    optimizer: str = "adam"
    batch: int = 64
    channels: list = field(default_factory=lambda: [16, 32, 64])
    parameterization: str = "v"
    seed: int = 0


@dataclass
class PerturbConfig:
    sigma_h: float = 3.0
    n_variants: int = 10
    site: str = "bottleneck"
    master_seed: int = 0


@dataclass
class AMSTSection:
    # "lambda" is a keyword in Python; the JSON key is accepted as an alias
    lam: float = 0.001
    tau: float = 0.01
    K: int = 10
    epochs_stage1: int = 30
    epochs_stage3: int = 30
    batch: int = 64
    lr: float = 2e-3
    optimizer: str = "adam"
    augment_labeled: bool = False
    lambda_max: float = 1.0


@dataclass
class EvalConfig:
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    sigma_sweep: list = field(default_factory=lambda: [0.0, 1.0, 3.0, 5.0])
    diversity_seeds: int = 32
    diversity_variants: int = 8
    fid_samples: int = 240


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    perturb: PerturbConfig = field(default_factory=PerturbConfig)
    amst: AMSTSection = field(default_factory=AMSTSection)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        d, f, p, a = self.diffusion, self.data, self.perturb, self.amst
        checks = [
            (f.name == "shapeset", "data.name", f"unknown dataset {f.name!r}"),
            (f.resolution >= 8 and f.resolution % 4 == 0, "data.resolution", "must be a multiple of 4 and >= 8"),
            (f.per_class >= 1 and f.test_per_class >= 1 and f.corpus_per_class >= 1,
             "data.per_class", "class counts must be >= 1"),
            (d.T >= 2, "diffusion.T", "must be >= 2"),
            (0 < d.beta_min <= d.beta_max < 1, "diffusion.beta_min", "need 0 < beta_min <= beta_max < 1"),
            (1 <= d.ddim_steps <= d.T, "diffusion.ddim_steps", "must lie in [1, T]"),
            (1 <= d.recon_steps <= d.T, "diffusion.recon_steps", "must lie in [1, T]"),
            (d.epochs >= 0 and d.batch >= 1, "diffusion.epochs", "epochs >= 0 and batch >= 1"),
            (d.optimizer in ("adam", "sgd"), "diffusion.optimizer", "must be 'adam' or 'sgd'"),
            (d.parameterization in ("eps", "v"), "diffusion.parameterization", "must be 'eps' or 'v'"),
            (len(d.channels) == 3 and all(int(c) > 0 for c in d.channels), "diffusion.channels",
             "need three positive widths"),
            (p.sigma_h >= 0, "perturb.sigma_h", "must be >= 0"),
            (p.n_variants >= 1, "perturb.n_variants", "must be >= 1"),
            (p.site in SITES, "perturb.site", f"must be one of {SITES}"),
            (a.lam >= 0, "amst.lambda", "must be >= 0"),
            (a.tau > 0, "amst.tau", "must be > 0"),
            (a.K >= 2, "amst.K", "must be >= 2"),
            (a.lambda_max >= 0, "amst.lambda_max", "must be >= 0"),
            (a.epochs_stage1 >= 0 and a.epochs_stage3 >= 0, "amst.epochs_stage1", "must be >= 0"),
            (a.batch >= 1, "amst.batch", "must be >= 1"),
            (a.optimizer in ("adam", "sgd"), "amst.optimizer", "must be 'adam' or 'sgd'"),
            (len(self.eval.seeds) >= 1, "eval.seeds", "need at least one seed"),
            (all(s >= 0 for s in self.eval.sigma_sweep), "eval.sigma_sweep", "sigmas must be >= 0"),
        ]
        for ok, key, msg in checks:
            if not ok:
                raise ConfigError(f"{key}: {msg}")
        return self

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["amst"]["lambda"] = out["amst"].pop("lam")
        return out

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


SECTIONS = {f.name: f.type for f in dataclasses.fields(RunConfig)}
_ALIASES = {("amst", "lambda"): "lam"}


def _section_fields(section: str) -> dict[str, dataclasses.Field]:
    cls = {"data": DataConfig, "diffusion": DiffusionConfig, "perturb": PerturbConfig,
           "amst": AMSTSection, "eval": EvalConfig}[section]
    return {f.name: f for f in dataclasses.fields(cls)}


def _coerce(key: str, value: Any, default: Any) -> Any:
    """Cast ``value`` to the type of ``default``; strings are parsed as JSON first."""
    if isinstance(value, str) and not isinstance(default, str):
        try:
            value = json.loads(value)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{key}: cannot parse {value!r}") from e
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return list(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def _apply(cfg: RunConfig, section: str, key: str, value: Any) -> None:
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section {section!r}")
    attr = _ALIASES.get((section, key), key)
    fields = _section_fields(section)
    if attr not in fields:
        raise ConfigError(f"unknown config key {section}.{key}")
    sub = getattr(cfg, section)
    setattr(sub, attr, _coerce(f"{section}.{key}", value, getattr(sub, attr)))


def from_dict(doc: dict, base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else RunConfig()
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    for section, body in doc.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(body, dict):
            raise ConfigError(f"{section}: expected an object")
        for key, value in body.items():
            _apply(cfg, section, key, value)
    return cfg


def parse_override(text: str) -> tuple[str, str, str]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    path, value = text.split("=", 1)
    if path.count(".") != 1:
        raise ConfigError(f"override key {path!r} is not of the form section.key")
    section, key = path.split(".")
    return section, key, value


def load_config(path: str | Path | None = None, overrides: list[str] | tuple = ()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"config file {path} not found") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        cfg = from_dict(doc, cfg)
    for text in overrides:
        _apply(cfg, *parse_override(text))
    return cfg.validate()
