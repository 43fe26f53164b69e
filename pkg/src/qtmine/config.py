"""Run configuration: one JSON file, overridable field by field from the CLI.

Only the keys present in the file are applied, so a config stays minimal and
self-documenting; unknown keys are rejected rather than silently ignored. The
single seed here feeds every stochastic component of a run.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import DataFormatError
from .model import ModelConfig
from .qt import DEFAULT_RANK_TEMPLATE, DEFAULT_TARGET_PHRASE
from .highlight import DEFAULT_HIGHLIGHT_TEMPLATE
from .train import TrainConfig


@dataclass
class RunConfig:
    corpus: str | None = None
    trials: str | None = None
    aliases: str | None = None
    approvals: str | None = None
    analogies: str | None = None
    checkpoint_dir: str = "checkpoints"
    output_dir: str = "out"

    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    max_seq: int = 128
    vocab_size: int = 8192

    lr: float = 3e-4
    batch_size: int = 16
    n_epochs: int = 10
    max_steps: int | None = None
    warmup_frac: float = 0.06

    template: str = DEFAULT_RANK_TEMPLATE
    target: str = DEFAULT_TARGET_PHRASE
    highlight_template: str = DEFAULT_HIGHLIGHT_TEMPLATE
    seed: int = 0

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(n_layers=self.n_layers, n_heads=self.n_heads,
                           d_model=self.d_model, d_ff=self.d_ff,
                           max_seq=self.max_seq, vocab_size=vocab_size)

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, batch_size=self.batch_size,
                           n_epochs=self.n_epochs, max_steps=self.max_steps,
                           warmup_frac=self.warmup_frac)

    def to_dict(self) -> dict:
        return asdict(self)


def load_config(path: str | Path | None) -> RunConfig:
    """Read a JSON config; a missing path means all defaults."""
    cfg = RunConfig()
    if path is None:
        return cfg
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise DataFormatError(f"config {path} must hold a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise DataFormatError(f"config {path} has unknown keys: {', '.join(unknown)}")
    for key, value in data.items():
        setattr(cfg, key, value)
    return cfg


def apply_overrides(cfg: RunConfig, **overrides) -> RunConfig:
    """Set any non-None keyword onto the config; unknown names are an error."""
    known = {f.name for f in fields(RunConfig)}
    for key, value in overrides.items():
        if key not in known:
            raise DataFormatError(f"unknown config field: {key}")
        if value is not None:
            setattr(cfg, key, value)
    return cfg
