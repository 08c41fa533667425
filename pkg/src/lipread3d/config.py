"""Experiment configuration: JSON files whose keys mirror ``ExperimentConfig``."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .backends import BACKENDS
from .errors import ConfigError
from .frontends import FrontEndKind, parse_multiplier

PRETRAIN = ("none", "inflate_only", "two_round")
_INPUT_ALIASES = {"gray": "gray", "grayscale": "gray", "flow": "flow"}


@dataclass
class StageConfig:
    """Budget of one pre-training round (see ``inflation.StageTask``)."""

    classes: int = 10
    samples_per_class: int = 16
    clip_length: int = 1
    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 16


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    inputs: list[str] = field(default_factory=lambda: ["gray"])
    frontend: str = "I3D"
    backend: str = "BiLSTM"
    pretrain: str = "none"
    width_multiplier: str = "1/8"
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    batch_size: int = 16
    epochs: int = 50
    seed: int = 0
    train_manifest: str = ""
    val_manifest: str = ""
    test_manifest: str = ""
    stats: str = ""  # statistics JSON; computed from the training split when empty
    out_dir: str = "runs"
    augment: bool = True
    max_shift: int = 5
    stop_at_train_acc: Optional[float] = None
    patience: Optional[int] = None
    time_budget: Optional[float] = None
    flow_clip_max: float = 8.0
    flow_levels: int = 1
    round1: StageConfig = field(default_factory=StageConfig)
    round2: StageConfig = field(default_factory=lambda: StageConfig(clip_length=16))

    # ---------------------------------------------------------------- checks
    def validate(self) -> "ExperimentConfig":
        """Normalise aliases and enforce the combination rules; raises ConfigError."""
        try:
            inputs = sorted({_INPUT_ALIASES[i] for i in self.inputs}, key=("gray", "flow").index)
        except KeyError as exc:
            raise ConfigError(f"unknown input {exc.args[0]!r}; use gray and/or flow") from None
        if not inputs:
            raise ConfigError("at least one input stream is required")
        self.inputs = inputs
        try:
            kind = FrontEndKind.parse(self.frontend, self.width_multiplier)
            parse_multiplier(self.width_multiplier)
        except (ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from None
        if kind.two_stream and inputs != ["gray", "flow"]:
            raise ConfigError(f"rule: a TwoStream front-end requires both gray and flow inputs, got {inputs}")
        if not kind.two_stream and len(inputs) != 1:
            raise ConfigError("rule: gray+flow inputs require a TwoStream front-end")
        if self.backend not in BACKENDS:
            raise ConfigError(f"rule: back-end must be one of {BACKENDS}, got {self.backend!r}")
        if self.pretrain not in PRETRAIN:
            raise ConfigError(f"rule: pretrain must be one of {PRETRAIN}, got {self.pretrain!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("rule: epochs and batch_size must be positive")
        if not self.lr > 0:
            raise ConfigError("rule: lr must be positive")
        if self.flow_clip_max <= 0:
            raise ConfigError("rule: flow_clip_max must be positive")
        return self

    @property
    def kind(self) -> FrontEndKind:
        return FrontEndKind.parse(self.frontend, self.width_multiplier)

    @property
    def m(self):
        return parse_multiplier(self.width_multiplier)

    # ---------------------------------------------------------------- I/O
    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}")
        doc = dict(doc)
        for key in ("round1", "round2"):
            if key in doc and isinstance(doc[key], dict):
                try:
                    doc[key] = StageConfig(**doc[key])
                except TypeError as exc:
                    raise ConfigError(f"{key}: {exc}") from None
        if "betas" in doc:
            doc["betas"] = tuple(doc["betas"])
        if "width_multiplier" in doc:
            doc["width_multiplier"] = str(doc["width_multiplier"])
        return cls(**doc).validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        return cls.from_dict(doc)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


# Ablation grid: (inputs, front-end, back-end, pre-training) per row
GRID_ROWS: dict[str, tuple[list[str], str, str, str]] = {
    "a": (["gray"], "Shallow3D_Res2D", "TC1D", "none"),
    "b": (["gray"], "Shallow3D_Res2D", "BiLSTM", "none"),
    "c": (["gray"], "Res2D", "BiLSTM", "none"),
    "d": (["gray"], "Res2D", "BiLSTM", "inflate_only"),
    "e": (["gray"], "I3D", "BiLSTM", "none"),
    "f": (["gray"], "I3D", "BiLSTM", "two_round"),
    "g": (["flow"], "Shallow3D_Res2D", "BiLSTM", "none"),
    "h": (["flow"], "I3D", "BiLSTM", "two_round"),
    "i": (["gray", "flow"], "TwoStream(Shallow3D_Res2D)", "BiLSTM", "none"),
    "j": (["gray", "flow"], "TwoStream(I3D)", "BiLSTM", "two_round"),
}


def default_grid(base: Optional[ExperimentConfig] = None, rows: str = "abcdefghij") -> list[ExperimentConfig]:
    """One config per requested row, sharing every other setting (and the seed) with ``base``."""
    base = base or ExperimentConfig()
    out = []
    for r in rows:
        if r not in GRID_ROWS:
            raise ConfigError(f"unknown grid row {r!r}")
        inputs, fe, be, pre = GRID_ROWS[r]
        doc = base.to_dict()
        doc.update(name=f"row_{r}", inputs=list(inputs), frontend=fe, backend=be, pretrain=pre)
        out.append(ExperimentConfig.from_dict(doc))
    return out


def load_grid(path) -> list[ExperimentConfig]:
    """Grid file: ``{"base": {...}, "rows": "abc..."}`` or ``{"configs": [{...}, ...]}``."""
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"grid file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"grid file {path} is not valid JSON: {exc}") from None
    if "configs" in doc:
        return [ExperimentConfig.from_dict(c) for c in doc["configs"]]
    base = ExperimentConfig.from_dict(doc.get("base", {}))
    return default_grid(base, doc.get("rows", "abcdefghij"))
