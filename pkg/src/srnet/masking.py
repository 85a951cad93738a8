"""Binary / real-valued pruning masks, thresholding and sparsity schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping

import numpy as np

from .checkpoint import MaskRecord
from .model import CLASSIFIER


def binarize(real: np.ndarray, threshold: float) -> np.ndarray:
    """1 where ``real >= threshold`` (inclusive), else 0."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    return _at_or_above(real, threshold)


def _at_or_above(real: np.ndarray, threshold: float) -> np.ndarray:
    return (np.asarray(real) >= threshold).astype(np.float32)


def n_pruned(numel: int, s: float) -> int:
    # the epsilon keeps e.g. 0.3 * 10 from flooring to 2
    return min(numel, math.floor(s * numel + 1e-9))


def _prune_order(values: np.ndarray) -> np.ndarray:
    """Flat indices sorted smallest first; among equal values later indices come first."""
    flat = values.reshape(-1)
    idx = np.arange(flat.size)
    return np.lexsort((-idx, flat))


def init_hard(weight: np.ndarray, s: float, alpha: float, threshold: float) -> np.ndarray:
    """Zero the smallest-|W| ``floor(s * numel)`` entries, set the rest to ``alpha * threshold``."""
    if not 0.0 <= s < 1.0:
        raise ValueError("sparsity must lie in [0, 1)")
    w = np.asarray(weight)
    real = np.full(w.size, alpha * threshold, dtype=np.float32)
    real[_prune_order(np.abs(w))[: n_pruned(w.size, s)]] = 0.0
    return real.reshape(w.shape)


def init_soft(weight: np.ndarray) -> np.ndarray:
    return np.abs(np.asarray(weight, dtype=np.float32))


@dataclass
class SparsitySchedule:
    kind: str = "fixed"
    s_start: float = 0.0
    s_final: float = 0.5
    t_begin: int = 0
    t_end: int = 1

    def __post_init__(self):
        if self.kind not in ("fixed", "cubic"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "cubic" and self.t_end <= self.t_begin:
            raise ValueError("cubic schedule needs t_end > t_begin")


def schedule_eval(schedule: SparsitySchedule, t: float) -> float:
    if t < 0:
        raise ValueError("t must be non-negative")
    if schedule.kind == "fixed":
        return schedule.s_final
    if schedule.t_end <= schedule.t_begin:
        raise ValueError("cubic schedule needs t_end > t_begin")
    frac = (min(max(t, schedule.t_begin), schedule.t_end) - schedule.t_begin) / (schedule.t_end - schedule.t_begin)
    if frac >= 1.0:
        return schedule.s_final
    return schedule.s_final + (schedule.s_start - schedule.s_final) * (1.0 - frac) ** 3


@dataclass
class MaskConfig:
    threshold: float = 0.01
    alpha: float = 2.0
    threshold_interval: int = 100
    init: str = "hard"
    sparsity: float = 0.5
    schedule: SparsitySchedule | None = None

    def __post_init__(self):
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")
        if self.alpha < 1:
            raise ValueError("alpha must be >= 1")
        if not 0.0 <= self.sparsity < 1.0:
            raise ValueError("sparsity must lie in [0, 1)")
        if self.init not in ("hard", "soft"):
            raise ValueError(f"unknown mask init {self.init!r}")
        if self.threshold_interval <= 0:
            raise ValueError("threshold_interval must be positive")

    def effective_schedule(self) -> SparsitySchedule:
        return self.schedule or SparsitySchedule("fixed", self.sparsity, self.sparsity)


@dataclass
class MaskPair:
    """Real-valued mask, its binarisation and the per-matrix threshold.

    ``binary`` equals ``binarize(real, threshold)`` except where a rank-based
    threshold update had to split a run of tied values.
    """

    owner: str
    real: np.ndarray | None
    binary: np.ndarray
    threshold: float | None = None

    def __post_init__(self):
        if self.real is not None and self.real.shape != self.binary.shape:
            raise ValueError(f"mask shapes differ for {self.owner}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.binary.shape

    def refresh(self) -> None:
        if self.real is None or self.threshold is None:
            raise ValueError(f"mask {self.owner} has no real-valued mask / threshold")
        # rank-derived thresholds may sit at or below zero once updates push m̂ negative
        self.binary = _at_or_above(self.real, self.threshold)

    def copy(self) -> "MaskPair":
        return MaskPair(self.owner, None if self.real is None else self.real.copy(), self.binary.copy(),
                        self.threshold)


@dataclass
class MaskedParameterSet:
    """One :class:`MaskPair` per prunable matrix, keyed by parameter name."""

    pairs: dict[str, MaskPair] = field(default_factory=dict)

    def __getitem__(self, name: str) -> MaskPair:
        return self.pairs[name]

    def __contains__(self, name: str) -> bool:
        return name in self.pairs

    def __iter__(self) -> Iterator[str]:
        return iter(self.pairs)

    def __len__(self) -> int:
        return len(self.pairs)

    def values(self) -> Iterable[MaskPair]:
        return self.pairs.values()

    def binary(self) -> dict[str, np.ndarray]:
        return {k: p.binary for k, p in self.pairs.items()}

    def copy(self) -> "MaskedParameterSet":
        return MaskedParameterSet({k: p.copy() for k, p in self.pairs.items()})

    def to_records(self) -> dict[str, MaskRecord]:
        return {k: MaskRecord(p.binary, p.real, p.threshold) for k, p in self.pairs.items()}

    @classmethod
    def from_records(cls, records: Mapping[str, MaskRecord]) -> "MaskedParameterSet":
        return cls({k: MaskPair(k, r.real, np.asarray(r.binary, dtype=np.float32), r.threshold)
                    for k, r in records.items()})

    @classmethod
    def ones(cls, shapes: Mapping[str, tuple[int, ...]]) -> "MaskedParameterSet":
        return cls({k: MaskPair(k, None, np.ones(s, dtype=np.float32)) for k, s in shapes.items()})

    @classmethod
    def from_binary(cls, masks: Mapping[str, np.ndarray]) -> "MaskedParameterSet":
        return cls({k: MaskPair(k, None, np.asarray(m, dtype=np.float32).copy()) for k, m in masks.items()})


def init_masks(weights: Mapping[str, np.ndarray], cfg: MaskConfig, s: float | None = None) -> MaskedParameterSet:
    """Real-valued masks for every weight matrix per ``cfg.init``.

    Hard init keeps the global threshold; soft init derives a per-matrix
    threshold so the starting sparsity is exactly ``s``.
    """
    s = cfg.sparsity if s is None else s
    pairs = {}
    for name, w in weights.items():
        if cfg.init == "hard":
            real = init_hard(w, s, cfg.alpha, cfg.threshold)
            pairs[name] = MaskPair(name, real, binarize(real, cfg.threshold), cfg.threshold)
        else:
            pairs[name] = MaskPair(name, init_soft(w), np.ones_like(w, dtype=np.float32), None)
    masks = MaskedParameterSet(pairs)
    if cfg.init == "soft":
        recompute_threshold(masks, s)
    return masks


def recompute_threshold(masks: MaskedParameterSet, s: float) -> dict[str, float]:
    """Per matrix, move the threshold so exactly ``numel - floor(s * numel)`` entries survive.

    The threshold becomes the (floor(s*numel)+1)-th smallest real value; ties
    at that value keep the earlier flattened indices.
    """
    if not 0.0 <= s < 1.0:
        raise ValueError("sparsity must lie in [0, 1)")
    out = {}
    for name, pair in masks.pairs.items():
        if pair.real is None:
            raise ValueError(f"mask {name} has no real-valued mask")
        flat = pair.real.reshape(-1)
        k = n_pruned(flat.size, s)
        order = _prune_order(flat)
        thr = float(flat[order[k]])
        binary = np.ones(flat.size, dtype=np.float32)
        binary[order[:k]] = 0.0
        pair.binary = binary.reshape(pair.real.shape)
        pair.threshold = thr
        out[name] = thr
    return out


def ste_step(masks: MaskedParameterSet, grads: Mapping[str, np.ndarray], lr: float) -> None:
    """``real -= lr * dL/dm`` (straight-through), then re-binarise at the current threshold."""
    missing = [k for k in masks if grads.get(k) is None]
    if missing:
        raise ValueError(f"no mask gradient for {', '.join(missing)}")
    for name, pair in masks.pairs.items():
        if pair.real is None:
            raise ValueError(f"mask {name} has no real-valued mask")
        pair.real = (pair.real - lr * np.asarray(grads[name], dtype=np.float64)).astype(np.float32)
        pair.refresh()


def sparsity_of(masks: MaskedParameterSet | Mapping[str, np.ndarray], count_classifier: bool = False) -> float:
    """Pruned fraction of the prunable parameters covered by ``masks``.

    The classifier matrix is masked like any other but stays out of the count
    unless ``count_classifier`` is set.
    """
    bins = masks.binary() if isinstance(masks, MaskedParameterSet) else masks
    total = zeros = 0
    for name, b in bins.items():
        if name == CLASSIFIER and not count_classifier:
            continue
        b = np.asarray(b)
        total += b.size
        zeros += int(b.size - np.count_nonzero(b))
    if total == 0:
        raise ValueError("no masks to measure")
    return zeros / total


def per_matrix_sparsity(masks: MaskedParameterSet) -> dict[str, float]:
    return {k: 1.0 - np.count_nonzero(p.binary) / p.binary.size for k, p in masks.pairs.items()}
