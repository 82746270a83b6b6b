"""Declarative run configuration (YAML) with command-line overrides."""

from __future__ import annotations

import copy
from dataclasses import asdict, fields
from pathlib import Path

import yaml

from .dataset import SplitSpec, ToyCorpusSpec
from .encoders import EncoderSpec
from .frontend import FrontendConfig
from .oc import OCSoftmaxParams
from .train import TrainConfig

VISUAL_ENCODERS = {"resnet": "visual_resnet", "scnet_stil": "visual_scnet_stil"}

DEFAULTS = {
    "seed": 0,
    "out_dir": "runs/default",
    "data": {
        "toy": True,
        "toy_spec": {},
        "corpus": None,  # {"table": csv path, "root": media dir, "columns": {...}}
        "split": {},
        "media_root": None,
    },
    "frontend": {},
    "model": {
        "mode": "msoc",
        "use_oc": True,
        "visual_encoder": "resnet",
        "audio_width": None,
        "visual_width": None,
        "depth": 1,
    },
    "train": {},
}


class ConfigError(ValueError):
    pass


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _build(cls, values, section):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {', '.join(sorted(unknown))}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section}: {exc}") from None


class RunConfig:
    def __init__(self, raw: dict, source: Path | None = None):
        self.raw = raw
        self.source = source
        self.validate()

    @classmethod
    def load(cls, path=None, overrides=None) -> "RunConfig":
        raw = {}
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise ConfigError(f"config file not found: {path}")
            try:
                raw = yaml.safe_load(path.read_text()) or {}
            except yaml.YAMLError as exc:
                raise ConfigError(f"cannot parse {path}: {exc}") from None
            if not isinstance(raw, dict):
                raise ConfigError(f"{path}: top level must be a mapping")
        unknown = set(raw) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown top-level keys: {', '.join(sorted(unknown))}")
        return cls(_merge(_merge(DEFAULTS, raw), overrides or {}), path)

    def validate(self):
        self.frontend()
        self.audio_spec()
        self.visual_spec()
        self.train_config()
        if self.raw["model"]["mode"] not in ("msoc", "avoc"):
            raise ConfigError(f"model.mode must be msoc or avoc, got {self.raw['model']['mode']!r}")
        if self.is_toy:
            self.toy_spec()
        self.split_spec()

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def out_dir(self) -> Path:
        return Path(self.raw["out_dir"])

    @property
    def is_toy(self) -> bool:
        return bool(self.raw["data"]["toy"])

    def frontend(self) -> FrontendConfig:
        return _build(FrontendConfig, self.raw["frontend"], "frontend")

    def toy_spec(self) -> ToyCorpusSpec:
        values = {"seed": self.seed} | self.raw["data"]["toy_spec"]
        return _build(ToyCorpusSpec, values, "data.toy_spec")

    def split_spec(self) -> SplitSpec:
        values = {"seed": self.seed} | dict(self.raw["data"]["split"])
        if self.is_toy and "holdout_methods" not in values:
            toy = self.toy_spec()
            values["holdout_methods"] = tuple(toy.holdout_styles) + tuple(toy.fafv_holdout)
        return _build(SplitSpec, values, "data.split")

    def audio_spec(self) -> EncoderSpec:
        m = self.raw["model"]
        return _build(EncoderSpec, {"kind": "audio_resnet", "width": m["audio_width"], "depth": m["depth"]},
                      "model")

    def visual_spec(self) -> EncoderSpec:
        m = self.raw["model"]
        kind = VISUAL_ENCODERS.get(m["visual_encoder"])
        if kind is None:
            raise ConfigError(f"model.visual_encoder must be one of {sorted(VISUAL_ENCODERS)}")
        return _build(EncoderSpec, {"kind": kind, "width": m["visual_width"], "depth": m["depth"]}, "model")

    def train_config(self) -> TrainConfig:
        values = dict(self.raw["train"])
        if "oc_params" in values:
            values["oc_params"] = _build(OCSoftmaxParams, values["oc_params"], "train.oc_params")
        return _build(TrainConfig, values, "train")

    @property
    def mode(self) -> str:
        return self.raw["model"]["mode"]

    @property
    def use_oc(self) -> bool:
        return bool(self.raw["model"]["use_oc"])

    def resolved(self) -> dict:
        """Fully expanded configuration, including every default."""
        out = copy.deepcopy(self.raw)
        out["frontend"] = asdict(self.frontend())
        out["train"] = asdict(self.train_config())
        out["train"]["seeds"] = list(out["train"]["seeds"])
        split = asdict(self.split_spec())
        split["holdout_methods"] = list(split["holdout_methods"])
        out["data"]["split"] = split
        if self.is_toy:
            out["data"]["toy_spec"] = {k: list(v) if isinstance(v, tuple) else v
                                       for k, v in asdict(self.toy_spec()).items()}
        out["model"]["audio_width"] = self.audio_spec().width
        out["model"]["visual_width"] = self.visual_spec().width
        out["out_dir"] = str(self.out_dir)
        return out

    def write_resolved(self, directory) -> Path:
        path = Path(directory) / "resolved_config.yaml"
        path.write_text(yaml.safe_dump(self.resolved(), sort_keys=True))
        return path
