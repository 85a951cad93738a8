"""Flat ``key=value`` run configuration shared by the harness and the CLI."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import get_type_hints

from .data import DatasetSpec
from .masking import MaskConfig, SparsitySchedule
from .model import ModelConfig
from .seeding import derive_seed


@dataclass
class RunConfig:
    # data
    vocab_size: int = 60
    n_train: int = 10_000
    n_dev: int = 1_000
    n_ood: int = 2_000
    n_ood_train: int = 2_000
    bias_strength: float = 0.9
    n_classes: int = 2
    n_markers: int = 8
    a_len: tuple[int, int] = (6, 8)
    b_len: tuple[int, int] = (4, 6)
    n_distractors: tuple[int, int] = (1, 1)
    bigram_at_start: bool = True
    ood_positive_fraction: float = 0.5
    # model
    n_layers: int = 2
    d_model: int = 64
    d_ffn: int = 256
    n_heads: int = 4
    max_len: int = 24
    activation: str = "gelu"
    init_std: float = 0.1
    # pretraining
    pretrain_steps: int = 2_000
    pretrain_lr: float = 1e-3
    pretrain_corpus: int = 10_000
    # fine-tuning
    epochs: int = 3
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.01
    eval_interval: int = 200
    # subnetwork search
    search_factor: float = 1.7
    mask_lr: float = 1.0
    mask_threshold: float = 0.01
    mask_alpha: float = 2.0
    threshold_interval: int = 100
    mask_init: str = "hard"
    delta_s: float = 0.1
    imp_interval_frac: float = 0.1
    prune_scope: str = "local"
    metric: str = "acc"
    # bias model
    bias_steps: int = 1_000
    bias_lr: float = 0.05
    # sweep
    seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2, 3)
    sparsities: tuple[float, ...] = (0.2, 0.5, 0.7, 0.9)
    timing_sparsity: float = 0.7
    timing_fractions: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    gradual_start: float = 0.7
    gradual_target: float = 0.9
    gradual_end_frac: float = 0.5
    plateau_patience: int = 3
    collapse_drop: float = 0.10

    # -- derived --------------------------------------------------------

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(vocab_size=self.vocab_size, n_train=self.n_train, n_dev=self.n_dev, n_ood=self.n_ood,
                           n_ood_train=self.n_ood_train, bias_strength=self.bias_strength,
                           n_classes=self.n_classes, seed=derive_seed(self.seed, "data"),
                           n_markers=self.n_markers, a_len=self.a_len, b_len=self.b_len,
                           n_distractors=self.n_distractors,
                           bigram_at_start=self.bigram_at_start, ood_positive_fraction=self.ood_positive_fraction)

    def model_config(self) -> ModelConfig:
        return ModelConfig(n_layers=self.n_layers, d_model=self.d_model, d_ffn=self.d_ffn, n_heads=self.n_heads,
                           vocab_size=self.vocab_size, max_len=self.max_len, n_classes=self.n_classes,
                           activation=self.activation, init_std=self.init_std)

    def mask_config(self, sparsity: float, init: str | None = None,
                    schedule: SparsitySchedule | None = None) -> MaskConfig:
        return MaskConfig(threshold=self.mask_threshold, alpha=self.mask_alpha,
                          threshold_interval=self.threshold_interval, init=init or self.mask_init,
                          sparsity=sparsity, schedule=schedule)

    @property
    def ft_steps(self) -> int:
        return self.epochs * -(-self.n_train // self.batch_size)

    @property
    def search_steps(self) -> int:
        return int(round(self.search_factor * self.ft_steps))

    @property
    def metric_key(self) -> str:
        return "id_acc" if self.metric == "acc" else "id_f1"

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # -- text form ------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        return cls().update(parse_pairs(text.splitlines()))

    def update(self, pairs: dict[str, str]) -> "RunConfig":
        """New config with string values parsed per field type; unknown keys raise ``KeyError``."""
        hints = get_type_hints(type(self))
        known = {f.name for f in fields(self)}
        changes = {}
        for key, raw in pairs.items():
            if key not in known:
                raise KeyError(f"unknown config key {key!r}")
            changes[key] = _parse_value(hints[key], raw, getattr(self, key))
        return self.replace(**changes)


def parse_pairs(lines) -> dict[str, str]:
    out = {}
    for line in lines:
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _parse_value(hint, raw: str, current):
    if isinstance(current, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        elem = type(current[0]) if current else float
        parts = [p for p in raw.replace(" ", "").split(",") if p]
        return tuple(elem(p) for p in parts)
    return raw


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        cfg = RunConfig.from_text(Path(path).read_text(encoding="utf-8"))
    if overrides:
        cfg = cfg.update(overrides)
    return cfg
