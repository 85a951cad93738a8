"""Subnetwork search: iterative magnitude pruning (optionally rewound) and mask training."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .data import iterate_batches
from .debias import LOSSES
from .masking import (MaskConfig, MaskedParameterSet, SparsitySchedule, _prune_order, init_masks, n_pruned,
                      recompute_threshold, schedule_eval, sparsity_of, ste_step)
from .metrics import SELECTION_RULES, select_checkpoint
from .model import CLASSIFIER, Encoder, ParameterSnapshot
from .optim import OptimizerState, adamw_step, zero_grad
from .seeding import rng_for
from .tensor import Tape, Tensor
from .train import Evaluator, TrainData, TrajectoryPoint, eval_due

METHODS = ("imp", "imp-rw", "mask")


@dataclass
class PruningRunConfig:
    method: str = "mask"
    loss: str = "std"
    t_max: int = 1000
    delta_t: int | None = None
    delta_s: float = 0.1
    sparsity: float = 0.5
    mask: MaskConfig = field(default_factory=MaskConfig)
    eval_interval: int = 100
    seed: int = 0
    lr: float = 3e-4
    mask_lr: float = 3e-4
    weight_decay: float = 0.01
    batch_size: int = 32
    scope: str = "local"
    selection: str = "all_steps"
    metric: str = "id_acc"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown pruning method {self.method!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.scope not in ("local", "global"):
            raise ValueError(f"unknown pruning scope {self.scope!r}")
        if self.selection not in SELECTION_RULES:
            raise ValueError(f"unknown selection rule {self.selection!r}")
        if not 0.0 <= self.sparsity < 1.0:
            raise ValueError("sparsity must lie in [0, 1)")
        if self.t_max <= 0 or self.eval_interval <= 0:
            raise ValueError("t_max and eval_interval must be positive")
        if self.delta_t is None:
            self.delta_t = max(1, round(0.1 * self.t_max))
        if self.method != "mask":
            k = self.sparsity / self.delta_s
            if abs(k - round(k)) > 1e-6:
                raise ValueError(f"sparsity {self.sparsity} is not a multiple of delta_s {self.delta_s}")

    @property
    def n_events(self) -> int:
        return int(round(self.sparsity / self.delta_s))


@dataclass
class Subnetwork:
    masks: MaskedParameterSet
    weights: ParameterSnapshot
    provenance: dict[str, str] = field(default_factory=dict)
    trajectory: list[TrajectoryPoint] = field(default_factory=list)
    selected_step: int | None = None
    history: list[MaskedParameterSet] = field(default_factory=list)

    @property
    def sparsity(self) -> float:
        return sparsity_of(self.masks)


def extract_mask(sub: Subnetwork) -> MaskedParameterSet:
    """The subnetwork's structure, by value."""
    return sub.masks.copy()


def prune_by_magnitude(masks: MaskedParameterSet, weights: Mapping[str, np.ndarray], delta_s: float,
                       target: float | None = None, scope: str = "local") -> MaskedParameterSet:
    """Zero the smallest-|w| surviving entries, in place.

    Local scope works per matrix and brings each one to ``floor(target * numel)``
    pruned entries, where ``target`` defaults to the current pruned fraction plus
    ``delta_s``.  Global scope ranks all entries of all masked matrices together.
    Pruned entries never come back.
    """
    if scope == "global":
        return _prune_global(masks, weights, delta_s, target)
    for name, pair in masks.pairs.items():
        binary = pair.binary.reshape(-1)
        numel = binary.size
        pruned_now = numel - int(np.count_nonzero(binary))
        goal = n_pruned(numel, target) if target is not None else pruned_now + n_pruned(numel, delta_s)
        extra = goal - pruned_now
        survivors = numel - pruned_now
        if extra > survivors or goal >= numel:
            raise ValueError(f"cannot prune {extra} more entries of {name}: only {survivors} remain")
        if extra <= 0:
            continue
        mag = np.abs(np.asarray(weights[name], dtype=np.float64)).reshape(-1)
        mag = np.where(binary > 0, mag, -1.0)  # already-pruned entries sort first and are skipped
        order = _prune_order(mag)
        new = binary.copy()
        new[order[pruned_now:goal]] = 0.0
        pair.binary = new.reshape(pair.binary.shape)
    return masks


def _prune_global(masks, weights, delta_s, target):
    names = list(masks.pairs)
    binary = np.concatenate([masks[n].binary.reshape(-1) for n in names])
    mag = np.concatenate([np.abs(np.asarray(weights[n], dtype=np.float64)).reshape(-1) for n in names])
    numel = binary.size
    pruned_now = numel - int(np.count_nonzero(binary))
    goal = n_pruned(numel, target) if target is not None else pruned_now + n_pruned(numel, delta_s)
    if goal >= numel:
        raise ValueError("global pruning would remove every entry")
    order = _prune_order(np.where(binary > 0, mag, -1.0))
    binary = binary.copy()
    binary[order[pruned_now:goal]] = 0.0
    start = 0
    for n in names:
        size = masks[n].binary.size
        masks[n].binary = binary[start:start + size].reshape(masks[n].binary.shape)
        start += size
    return masks


def _matrix_values(model: Encoder) -> dict[str, np.ndarray]:
    return {n: model.params[n].data for n in model.prunable}


def _select(traj: list[TrajectoryPoint], cfg: PruningRunConfig, eligible=None) -> int:
    points = [(p.step, p.metrics[cfg.metric]) for p in traj if eligible is None or eligible(p)]
    if not points:
        points = [(p.step, p.metrics[cfg.metric]) for p in traj]
    return select_checkpoint(points, cfg.selection, cfg.t_max)


def imp_run(model: Encoder, data: TrainData, evaluator: Evaluator, cfg: PruningRunConfig,
            provenance: Mapping[str, str] | None = None) -> Subnetwork:
    """Alternate magnitude pruning and AdamW training of the surviving weights.

    Every ``delta_t`` steps the per-matrix pruned count moves to
    ``floor(n * delta_s * numel)`` for the n-th event.  ``imp`` keeps training
    for one more interval after the last event and returns the best eligible
    checkpoint; ``imp-rw`` stops at the last event and rewinds every weight to
    the snapshot the run started from.
    """
    if cfg.method not in ("imp", "imp-rw"):
        raise ValueError("imp_run needs method imp or imp-rw")
    k = cfg.n_events
    dt = cfg.delta_t
    needed = k * dt if cfg.method == "imp" else max(k - 1, 0) * dt
    if needed > cfg.t_max:
        raise ValueError(f"t_max={cfg.t_max} is too small to reach sparsity {cfg.sparsity} with delta_t={dt}")
    theta0 = model.snapshot("theta0", 0)
    masks = MaskedParameterSet.ones({n: model.params[n].shape for n in model.prunable})
    history = [masks.copy()]
    params = model.params
    state = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    batches = iterate_batches(len(data.enc), cfg.batch_size, rng_for(cfg.seed, "imp", "batches"))
    traj: list[TrajectoryPoint] = []
    states: dict[int, ParameterSnapshot] = {}
    running: list[float] = []
    events = 0
    step = 0

    def record(step):
        nonlocal running
        consts = masks.binary()
        loss = float(np.mean(running)) if running else float("nan")
        traj.append(TrajectoryPoint(step, sparsity_of(masks), loss, evaluator(model, consts)))
        states[step] = model.snapshot("imp", step)
        running = []

    while True:
        if step % dt == 0 and events < k:
            prune_by_magnitude(masks, _matrix_values(model), cfg.delta_s, target=(events + 1) * cfg.delta_s,
                               scope=cfg.scope)
            events += 1
            history.append(masks.copy())
            if events == k and cfg.method == "imp-rw":
                model.restore(theta0)
        if events == k and (cfg.method == "imp-rw" or step == k * dt):
            if not traj or traj[-1].step != step:
                record(step)
            break
        index = next(batches)
        consts = masks.binary()
        zero_grad(params)
        with Tape() as tape:
            loss_t = data.loss(cfg.loss, model.logits(data.enc.batch(index), consts), index)
        tape.backward(loss_t)
        adamw_step(params, state)
        running.append(loss_t.item())
        step += 1
        if eval_due(step, cfg.eval_interval, cfg.t_max):
            record(step)

    target = sparsity_of(masks)
    if cfg.method == "imp-rw":
        chosen, weights = step, theta0.copy()
        weights.tag = "theta0"
    else:
        chosen = _select(traj, cfg, lambda p: abs(p.sparsity - target) < 1e-12)
        weights = states[chosen]
    prov = {"method": cfg.method, "loss": cfg.loss, "sparsity": f"{cfg.sparsity:g}", "seed": str(cfg.seed),
            "selected_step": str(chosen), **dict(provenance or {})}
    return Subnetwork(masks, weights, prov, traj, chosen, history)


def mask_train_run(model: Encoder, data: TrainData, evaluator: Evaluator, cfg: PruningRunConfig,
                   provenance: Mapping[str, str] | None = None) -> Subnetwork:
    """Learn binary masks over the frozen weights of ``model`` with straight-through updates."""
    if cfg.method != "mask":
        raise ValueError("mask_train_run needs method mask")
    mcfg = cfg.mask
    schedule = mcfg.schedule or SparsitySchedule("fixed", cfg.sparsity, cfg.sparsity)
    masks = init_masks(_matrix_values(model), mcfg, schedule_eval(schedule, 0))
    frozen = {k: p.requires_grad for k, p in model.params.items()}
    for p in model.params.values():
        p.requires_grad = False
    batches = iterate_batches(len(data.enc), cfg.batch_size, rng_for(cfg.seed, "mask-train", "batches"))
    traj: list[TrajectoryPoint] = []
    states: dict[int, MaskedParameterSet] = {}
    running: list[float] = []
    try:
        for t in range(cfg.t_max):
            index = next(batches)
            mtens = {n: Tensor(pair.binary, requires_grad=True, name=n) for n, pair in masks.pairs.items()}
            with Tape() as tape:
                loss_t = data.loss(cfg.loss, model.logits(data.enc.batch(index), mtens), index)
            tape.backward(loss_t)
            ste_step(masks, {n: m.grad for n, m in mtens.items()}, cfg.mask_lr)
            running.append(loss_t.item())
            step = t + 1
            if step % mcfg.threshold_interval == 0 or step == cfg.t_max:
                recompute_threshold(masks, schedule_eval(schedule, step))
            if eval_due(step, cfg.eval_interval, cfg.t_max):
                consts = masks.binary()
                traj.append(TrajectoryPoint(step, sparsity_of(masks), float(np.mean(running)),
                                            evaluator(model, consts)))
                states[step] = masks.copy()
                running = []
    finally:
        for k, p in model.params.items():
            p.requires_grad = frozen[k]
    final_s = schedule.s_final
    chosen = _select(traj, cfg, lambda p: at_target(states[p.step], final_s))
    prov = {"method": "mask", "loss": cfg.loss, "sparsity": f"{final_s:g}", "seed": str(cfg.seed),
            "selected_step": str(chosen), "init": mcfg.init, **dict(provenance or {})}
    weights = model.snapshot("frozen", chosen)
    return Subnetwork(states[chosen], weights, prov, traj, chosen)


def at_target(masks: MaskedParameterSet, s: float) -> bool:
    """True when every matrix, classifier included, has exactly ``floor(s * numel)`` pruned entries."""
    return all(pair.binary.size - np.count_nonzero(pair.binary) == n_pruned(pair.binary.size, s)
               for pair in masks.values())


def apply_masks(weights: ParameterSnapshot, masks: MaskedParameterSet) -> ParameterSnapshot:
    """Copy of ``weights`` with pruned positions zeroed."""
    out = weights.copy()
    for name, m in masks.binary().items():
        if out.params[name].shape != m.shape:
            raise ValueError(f"mask shape {m.shape} does not fit {name} {out.params[name].shape}")
        out.params[name] = out.params[name] * m
    return out
