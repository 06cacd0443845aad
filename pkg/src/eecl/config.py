"""Experiment configuration: flat ``key = value`` files with ``#`` comments."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .data import DATASETS
from .errors import ConfigError
from .methods import METHODS

BUDGET_MODES = ("test", "validation")


def _floats(text: str) -> tuple[float, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(float(v) for v in text.split(","))


def _ints(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    return tuple(int(v) for v in text.split(","))


def _flag(text: str) -> bool:
    v = text.strip().lower()
    if v in ("on", "true", "yes", "1"):
        return True
    if v in ("off", "false", "no", "0"):
        return False
    raise ValueError(f"expected on/off, got {text!r}")


def _optional_str(text: str) -> str | None:
    return text.strip() or None


def _optional_int(text: str) -> int | None:
    return int(text) if text.strip() else None


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    dataset: str = "synthetic-blobs"
    data_path: str | None = None
    labels_path: str | None = None
    test_data_path: str | None = None
    test_labels_path: str | None = None
    blob_classes: int = 10
    blob_dim: int = 32
    blob_per_class: int = 200
    blob_noise: float = 3.0
    test_fraction: float = 0.2
    num_tasks: int = 5
    method: str = "ft"
    memory: int = 200
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.02
    lr_milestones: tuple[int, ...] = (6, 12, 16)
    lr_decay: float = 0.1
    momentum: float = 0.9
    stages: int = 7
    width: int = 64
    ic_width: int | None = None
    ic_targets: tuple[float, ...] = (0.15, 0.45, 0.75)
    loss_weights: tuple[float, ...] = ()  # empty: the ramp schedule
    lwf_lambda: float = 1.0
    lwf_temperature: float = 2.0
    bic_val_fraction: float = 0.1
    bic_epochs: int = 100
    bic_lr: float = 0.001
    tlc: bool = True
    tau_points: int = 41
    budgets: tuple[float, ...] = (1.0, 0.75, 0.5, 0.25)
    budget_mode: str = "test"
    validation_fraction: float = 0.1
    output_dir: str = "run"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        problems = []
        if self.dataset not in DATASETS:
            problems.append(f"dataset must be one of {', '.join(DATASETS)}")
        if self.dataset != "synthetic-blobs" and not self.data_path:
            problems.append(f"dataset {self.dataset} needs data_path")
        if self.method not in METHODS:
            problems.append(f"method must be one of {', '.join(METHODS)}")
        if self.num_tasks < 1:
            problems.append("num_tasks must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            problems.append("epochs and batch_size must be >= 1")
        if self.memory < 0:
            problems.append("memory must be >= 0")
        if self.method in ("ft-e", "er", "bic", "icarl") and self.memory == 0 and self.num_tasks > 1:
            problems.append(f"method {self.method} needs memory > 0")
        if self.lr <= 0 or not 0 < self.lr_decay <= 1 or not 0 <= self.momentum < 1:
            problems.append("lr > 0, lr_decay in (0, 1] and momentum in [0, 1) required")
        if list(self.lr_milestones) != sorted(set(self.lr_milestones)) or any(m < 1 for m in self.lr_milestones):
            problems.append("lr_milestones must be strictly increasing positive epochs")
        if self.stages < 2 or self.width < 1:
            problems.append("need stages >= 2 and width >= 1")
        if any(not 0 < f < 1 for f in self.ic_targets):
            problems.append("ic_targets must lie strictly between 0 and 1")
        if self.loss_weights and len(self.loss_weights) != len(self.ic_targets) + 1:
            problems.append("loss_weights needs one entry per IC plus the final classifier")
        if self.lwf_temperature <= 0 or self.lwf_lambda < 0:
            problems.append("lwf_temperature > 0 and lwf_lambda >= 0 required")
        if not 0 < self.bic_val_fraction < 1 or self.bic_epochs < 0 or self.bic_lr <= 0:
            problems.append("bic_val_fraction in (0, 1), bic_epochs >= 0, bic_lr > 0 required")
        if self.tau_points < 0:
            problems.append("tau_points must be >= 0")
        if any(b <= 0 for b in self.budgets):
            problems.append("budgets must be positive")
        if self.budget_mode not in BUDGET_MODES:
            problems.append(f"budget_mode must be one of {', '.join(BUDGET_MODES)}")
        if not 0 < self.test_fraction < 1 or not 0 < self.validation_fraction < 1:
            problems.append("test_fraction and validation_fraction must lie in (0, 1)")
        if self.blob_classes < 1 or self.blob_dim < 1 or self.blob_per_class < 1 or self.blob_noise < 0:
            problems.append("blob settings must be positive")
        if problems:
            raise ConfigError("; ".join(problems))

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                text = "on" if v else "off"
            elif isinstance(v, tuple):
                text = ",".join(repr(x) for x in v)
            elif v is None:
                text = ""
            else:
                text = str(v)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"


_PARSERS = {
    "seed": int,
    "dataset": str.strip,
    "data_path": _optional_str,
    "labels_path": _optional_str,
    "test_data_path": _optional_str,
    "test_labels_path": _optional_str,
    "blob_classes": int,
    "blob_dim": int,
    "blob_per_class": int,
    "blob_noise": float,
    "test_fraction": float,
    "num_tasks": int,
    "method": lambda s: s.strip().lower(),
    "memory": int,
    "epochs": int,
    "batch_size": int,
    "lr": float,
    "lr_milestones": _ints,
    "lr_decay": float,
    "momentum": float,
    "stages": int,
    "width": int,
    "ic_width": _optional_int,
    "ic_targets": _floats,
    "loss_weights": _floats,
    "lwf_lambda": float,
    "lwf_temperature": float,
    "bic_val_fraction": float,
    "bic_epochs": int,
    "bic_lr": float,
    "tlc": _flag,
    "tau_points": int,
    "budgets": _floats,
    "budget_mode": str.strip,
    "validation_fraction": float,
    "output_dir": str.strip,
}

assert set(_PARSERS) == {f.name for f in dataclasses.fields(ExperimentConfig)}


def parse_config(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    """Parse config text.  Relative data paths resolve against ``base_dir``."""
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in _PARSERS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _PARSERS[key](value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    if "seed" not in values:
        raise ConfigError("seed is mandatory")
    if base_dir is not None:
        for key in ("data_path", "labels_path", "test_data_path", "test_labels_path"):
            if values.get(key):
                parts = [p.strip() for p in values[key].split(",")]
                values[key] = ",".join(str(base_dir / p) if not Path(p).is_absolute() else p for p in parts)
    return ExperimentConfig(**values)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, path.parent)
