"""Shared training loop pieces: loss inputs, evaluation and full fine-tuning."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import Encoded, iterate_batches
from .debias import training_loss
from .metrics import compute_metrics
from .model import Encoder, ParameterSnapshot
from .optim import OptimizerState, adamw_step, zero_grad
from .seeding import rng_for
from .tensor import Tape, Tensor


@dataclass
class TrainData:
    """Training rows plus the per-row inputs the debiasing losses need."""

    enc: Encoded
    bias_probs: np.ndarray | None = None
    teacher_probs: np.ndarray | None = None

    def __post_init__(self):
        for name in ("bias_probs", "teacher_probs"):
            arr = getattr(self, name)
            if arr is not None and len(arr) != len(self.enc):
                raise ValueError(f"{name} has {len(arr)} rows for {len(self.enc)} examples")

    def loss(self, selector: str, logits: Tensor, index: np.ndarray) -> Tensor:
        bias = None if self.bias_probs is None else self.bias_probs[index]
        teacher = None if self.teacher_probs is None else self.teacher_probs[index]
        return training_loss(selector, logits, self.enc.labels[index], bias, teacher)


class Evaluator:
    """Accuracy and weighted F1 on the ID dev split and any number of OOD splits."""

    def __init__(self, id_dev: Encoded, ood: Mapping[str, Encoded] | None = None, n_classes: int = 2,
                 batch_size: int = 500):
        self.splits = {"id": id_dev, **dict(ood or {})}
        self.n_classes = n_classes
        self.batch_size = batch_size

    def __call__(self, model: Encoder, masks: Mapping[str, np.ndarray] | None = None) -> dict[str, float]:
        out = {}
        for name, enc in self.splits.items():
            pred = model.predict_proba(enc, masks, self.batch_size).argmax(axis=1)
            rep = compute_metrics(pred, enc.labels, self.n_classes)
            out[f"{name}_acc"] = rep.accuracy
            out[f"{name}_f1"] = rep.weighted_f1
        return out


@dataclass
class TrajectoryPoint:
    step: int
    sparsity: float
    loss: float
    metrics: dict[str, float] = field(default_factory=dict)

    def row(self) -> dict[str, float | int]:
        return {"step": self.step, "sparsity": self.sparsity, "loss": self.loss, **self.metrics}


def write_trajectory(path: str | Path, points: Sequence[TrajectoryPoint]) -> None:
    rows = [p.row() for p in points]
    if not rows:
        return
    keys = list(rows[0])
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(keys)
        for r in rows:
            w.writerow([r[k] if isinstance(r[k], int) else f"{r[k]:.6f}" for k in keys])


def eval_due(step: int, interval: int, t_max: int) -> bool:
    return step % interval == 0 or step == t_max


@dataclass
class FinetuneResult:
    trajectory: list[TrajectoryPoint]
    snapshots: dict[int, ParameterSnapshot]
    states: dict[int, ParameterSnapshot]


def finetune(model: Encoder, data: TrainData, evaluator: Evaluator | None, *, steps: int, loss: str = "std",
             lr: float = 3e-4, weight_decay: float = 0.01, batch_size: int = 32, seed: int = 0,
             eval_interval: int = 100, masks: Mapping[str, np.ndarray] | None = None,
             snapshot_steps: Sequence[int] = (), keep_states: bool = False, sparsity: float = 0.0,
             stream: str = "finetune") -> FinetuneResult:
    """Train every parameter of ``model`` with AdamW for ``steps`` steps.

    Fixed binary ``masks`` (if given) multiply their weight matrices in the
    forward pass, so pruned positions receive zero gradient and their stored
    values only move through weight decay; they never affect the output.
    ``snapshot_steps`` lists step counts (0..steps) at which parameters are
    copied; ``keep_states`` keeps a copy at every evaluation step.
    """
    params = model.params
    state = OptimizerState(lr=lr, weight_decay=weight_decay)
    batches = iterate_batches(len(data.enc), batch_size, rng_for(seed, stream, "batches"))
    consts = None if masks is None else {k: np.asarray(v, dtype=np.float32) for k, v in masks.items()}
    wanted = set(snapshot_steps)
    snaps: dict[int, ParameterSnapshot] = {}
    states: dict[int, ParameterSnapshot] = {}
    traj: list[TrajectoryPoint] = []
    running: list[float] = []
    if 0 in wanted:
        snaps[0] = model.snapshot(stream, 0)
    for t in range(steps):
        index = next(batches)
        zero_grad(params)
        with Tape() as tape:
            loss_t = data.loss(loss, model.logits(data.enc.batch(index), consts), index)
        tape.backward(loss_t)
        adamw_step(params, state)
        running.append(loss_t.item())
        step = t + 1
        if step in wanted:
            snaps[step] = model.snapshot(stream, step)
        if evaluator is not None and eval_due(step, eval_interval, steps):
            traj.append(TrajectoryPoint(step, sparsity, float(np.mean(running)), evaluator(model, consts)))
            running = []
            if keep_states:
                states[step] = model.snapshot(stream, step)
    return FinetuneResult(traj, snaps, states)
