"""Experiment orchestration: the three paradigms, the OOD oracle, timing and gradual-sparsity studies."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import platform
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import checkpoint as ckpt
from .config import RunConfig
from .data import check_disjoint, encode, generate, pretrain_corpus, write_split
from .debias import (BiasModel, cache_precision, featurize, read_prob_cache, toy_embeddings, train_bias_model,
                     write_prob_cache)
from .masking import MaskedParameterSet, SparsitySchedule, sparsity_of
from .metrics import plateau_step, select_checkpoint
from .model import Encoder, ParameterSnapshot, model_from_snapshot, pretrain
from .pruning import PruningRunConfig, Subnetwork, extract_mask, imp_run, mask_train_run
from .seeding import derive_seed
from .train import Evaluator, TrainData, TrajectoryPoint, finetune

log = logging.getLogger(__name__)

PARADIGMS = ("prune_after_ft", "prune_then_ft", "mask_only")
PARADIGM_METHODS = {
    "prune_after_ft": ("imp", "mask"),
    "prune_then_ft": ("imp-rw", "mask"),
    "mask_only": ("mask",),
}
ORACLE_ARMS = ("masks on ft", "masks on pt", "masks on pt + ft")
GRADUAL_ARMS = ("fixed-hard", "fixed-soft", "gradual")


class ContractError(AssertionError):
    """A paradigm's structural guarantee was broken."""


@dataclass
class ExperimentRecord:
    study: str
    paradigm: str
    method: str
    ft_loss: str
    search_loss: str
    sparsity: float
    seed: int
    arm: str = ""
    metrics: dict[str, float] = field(default_factory=dict)
    achieved_sparsity: float = 0.0
    selected_step: int = 0
    plateau_step: int | None = None
    id_collapse: bool = False
    violations: list[str] = field(default_factory=list)
    trajectory: list[TrajectoryPoint] = field(default_factory=list)
    subnetwork: Subnetwork | None = None

    def row(self) -> dict[str, str]:
        out = {
            "study": self.study, "paradigm": self.paradigm, "method": self.method, "ft_loss": self.ft_loss,
            "search_loss": self.search_loss, "sparsity": f"{self.sparsity:.2f}", "seed": str(self.seed),
            "arm": self.arm,
        }
        for k in METRIC_KEYS:
            out[k] = f"{self.metrics.get(k, float('nan')):.6f}"
        out.update({
            "achieved_sparsity": f"{self.achieved_sparsity:.6f}",
            "selected_step": str(self.selected_step),
            "plateau_step": "" if self.plateau_step is None else str(self.plateau_step),
            "id_collapse": str(int(self.id_collapse)),
            "violations": ";".join(self.violations),
        })
        return out


METRIC_KEYS = ("id_acc", "id_f1", "ood_acc", "ood_f1")
GROUP_KEYS = ("study", "paradigm", "method", "ft_loss", "search_loss", "sparsity", "arm")


def _config_key(cfg: RunConfig) -> str:
    sweep = {"seeds", "sparsities", "timing_sparsity", "timing_fractions", "gradual_start", "gradual_target",
             "gradual_end_frac", "plateau_patience", "collapse_drop"}
    lines = [ln for ln in cfg.to_text().splitlines() if ln.split("=", 1)[0] not in sweep]
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:12]


class Lab:
    """Datasets, shared snapshots and cached loss inputs for one configuration.

    With a ``root`` directory the pretrained and fine-tuned snapshots, the
    bias-model and teacher probabilities are cached on disk and reused by
    later commands with the same configuration.
    """

    def __init__(self, cfg: RunConfig, root: str | Path | None = None):
        self.cfg = cfg
        self.spec = cfg.dataset_spec()
        self.model_cfg = cfg.model_config()
        self.splits = generate(self.spec)
        check_disjoint(self.splits["ood_train"], self.splits["ood_test"])
        self.enc = {k: encode(v, self.model_cfg.max_len) for k, v in self.splits.items()}
        self.evaluator = Evaluator(self.enc["id_dev"], {"ood": self.enc["ood_test"]}, self.spec.n_classes)
        self.cache_dir = None if root is None else Path(root) / "cache" / _config_key(cfg)
        if self.cache_dir is not None:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
        self._pt: ParameterSnapshot | None = None
        self._ft: dict[tuple[str, int], tuple[ParameterSnapshot, list[TrajectoryPoint]]] = {}
        self._bias: np.ndarray | None = None
        self._bias_model = None
        self._teacher: dict[int, np.ndarray] = {}
        self._mixture = None

    # -- cached artefacts ------------------------------------------------

    def _cache(self, name: str) -> Path | None:
        return None if self.cache_dir is None else self.cache_dir / name

    def theta_pt(self) -> ParameterSnapshot:
        if self._pt is None:
            path = self._cache("theta_pt.srnt")
            if path is not None and path.exists():
                self._pt = ParameterSnapshot(ckpt.load(path).params, "pt")
            else:
                cfg = self.cfg
                corpus = encode(pretrain_corpus(self.spec, cfg.pretrain_corpus, derive_seed(cfg.seed, "corpus")),
                                self.model_cfg.max_len)
                self._pt = pretrain(self.model_cfg, corpus, cfg.pretrain_steps, derive_seed(cfg.seed, "pretrain"),
                                    lr=cfg.pretrain_lr, batch_size=cfg.batch_size)
                if path is not None:
                    ckpt.save(path, self._pt.params, provenance={"tag": "pt", "steps": str(cfg.pretrain_steps)})
        return self._pt

    def bias_probs(self) -> np.ndarray:
        if self._bias is None:
            path = self._cache("bias_train.csv")
            if path is not None and path.exists():
                _, self._bias, _ = read_prob_cache(path)
            else:
                bm, emb = self.bias_model()
                # rounded to the cache's precision so cached and fresh runs agree bit for bit
                self._bias = cache_precision(bm.predict_proba(featurize(self.splits["id_train"], emb)))
                if path is not None:
                    beta = self._bias[np.arange(len(self._bias)), self.enc["id_train"].labels]
                    write_prob_cache(path, self.enc["id_train"].example_ids, self._bias, beta)
        return self._bias

    def bias_model(self) -> tuple[BiasModel, np.ndarray]:
        """The bias model fitted on ID train, with the embedding table its features use."""
        if self._bias_model is None:
            emb = toy_embeddings(self.spec.vocab_size, seed=derive_seed(self.cfg.seed, "embeddings"))
            bm = train_bias_model(featurize(self.splits["id_train"], emb), self.enc["id_train"].labels,
                                  self.spec.n_classes, steps=self.cfg.bias_steps, lr=self.cfg.bias_lr,
                                  seed=derive_seed(self.cfg.seed, "bias"))
            self._bias_model = (bm, emb)
        return self._bias_model

    def finetune_run(self, loss: str, seed: int, snapshot_steps: Sequence[int] = ()):
        """Fine-tune θ_pt on ID train; returns (final snapshot, trajectory, requested snapshots)."""
        model = model_from_snapshot(self.model_cfg, self.theta_pt())
        res = finetune(model, self.train_data(loss, seed), self.evaluator, steps=self.cfg.ft_steps, loss=loss,
                       lr=self.cfg.lr, weight_decay=self.cfg.weight_decay, batch_size=self.cfg.batch_size,
                       seed=derive_seed(seed, "finetune", loss), eval_interval=self.cfg.eval_interval,
                       snapshot_steps=snapshot_steps)
        snap = model.snapshot("ft", self.cfg.ft_steps)
        return snap, res.trajectory, res.snapshots

    def theta_ft(self, loss: str, seed: int) -> tuple[ParameterSnapshot, list[TrajectoryPoint]]:
        key = (loss, seed)
        if key not in self._ft:
            path = self._cache(f"theta_ft-{loss}-{seed}.srnt")
            tpath = self._cache(f"theta_ft-{loss}-{seed}.json")
            if path is not None and path.exists() and tpath.exists():
                snap = ParameterSnapshot(ckpt.load(path).params, "ft", self.cfg.ft_steps)
                traj = [TrajectoryPoint(**p) for p in json.loads(tpath.read_text())]
            else:
                snap, traj, _ = self.finetune_run(loss, seed)
                if path is not None:
                    ckpt.save(path, snap.params, provenance={"tag": "ft", "loss": loss, "seed": str(seed)})
                    tpath.write_text(json.dumps([p.__dict__ for p in traj]))
            self._ft[key] = (snap, traj)
        return self._ft[key]

    def teacher_probs(self, seed: int) -> np.ndarray:
        if seed not in self._teacher:
            path = self._cache(f"teacher-{seed}.csv")
            if path is not None and path.exists():
                _, probs, _ = read_prob_cache(path)
            else:
                snap, _ = self.theta_ft("std", seed)
                probs = cache_precision(model_from_snapshot(self.model_cfg, snap).predict_proba(self.enc["id_train"]))
                if path is not None:
                    write_prob_cache(path, self.enc["id_train"].example_ids, probs)
            self._teacher[seed] = probs
        return self._teacher[seed]

    def train_data(self, loss: str, seed: int) -> TrainData:
        if loss == "std":
            return TrainData(self.enc["id_train"])
        teacher = self.teacher_probs(seed) if loss == "confreg" else None
        return TrainData(self.enc["id_train"], self.bias_probs(), teacher)

    def mixture_data(self) -> TrainData:
        """ID train plus the OOD training pool, for the oracle study (standard loss only)."""
        if self._mixture is None:
            check_disjoint(self.splits["ood_train"], self.splits["ood_test"])
            check_disjoint(self.splits["id_train"], self.splits["ood_test"])
            self._mixture = TrainData(encode(self.splits["id_train"] + self.splits["ood_train"],
                                             self.model_cfg.max_len))
        return self._mixture

    def full_metric(self, loss: str, seed: int) -> dict[str, float]:
        snap, traj = self.theta_ft(loss, seed)
        return dict(traj[-1].metrics)

    # -- search configs --------------------------------------------------

    def search_config(self, method: str, loss: str, sparsity: float, seed: int, selection: str,
                      init: str | None = None, schedule: SparsitySchedule | None = None,
                      t_max: int | None = None) -> PruningRunConfig:
        cfg = self.cfg
        t_max = t_max or cfg.search_steps
        return PruningRunConfig(
            method=method, loss=loss, t_max=t_max, delta_t=max(1, round(cfg.imp_interval_frac * t_max)),
            delta_s=cfg.delta_s, sparsity=sparsity, mask=cfg.mask_config(sparsity, init, schedule),
            eval_interval=cfg.eval_interval, seed=derive_seed(seed, "search"), lr=cfg.lr, mask_lr=cfg.mask_lr,
            weight_decay=cfg.weight_decay, batch_size=cfg.batch_size, scope=cfg.prune_scope,
            selection=selection, metric=cfg.metric_key)


# ----------------------------------------------------------------------------
# contracts


def _same(a: ParameterSnapshot, b: ParameterSnapshot) -> bool:
    return a.params.keys() == b.params.keys() and all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def check_frozen(before: ParameterSnapshot, model: Encoder, label: str) -> list[str]:
    return [] if _same(before, model.snapshot()) else [f"{label}: weights changed during mask training"]


def check_rewind(start: ParameterSnapshot, theta_pt: ParameterSnapshot, masks: MaskedParameterSet) -> list[str]:
    bad = []
    for name, p in theta_pt.params.items():
        cur = start.params[name]
        if name in masks:
            keep = masks[name].binary > 0
            if not np.array_equal(cur[keep], p[keep]):
                bad.append(name)
        elif not np.array_equal(cur, p):
            bad.append(name)
    return [f"prune_then_ft: isolated fine-tuning did not start from θ_pt at {n}" for n in bad]


def assert_contracts(records: Iterable[ExperimentRecord]) -> None:
    broken = [(r, v) for r in records for v in r.violations]
    if broken:
        lines = [f"{r.study}/{r.paradigm}/{r.method} s={r.sparsity} seed={r.seed}: {v}" for r, v in broken]
        raise ContractError(f"{len(broken)} contract violation(s):\n" + "\n".join(lines))


# ----------------------------------------------------------------------------
# single runs


def _selected_metrics(traj: list[TrajectoryPoint], step: int) -> dict[str, float]:
    for p in traj:
        if p.step == step:
            return dict(p.metrics)
    raise KeyError(f"no evaluation at step {step}")


def _finish(lab: Lab, rec: ExperimentRecord, ft_loss: str | None) -> ExperimentRecord:
    key = lab.cfg.metric_key
    if ft_loss is not None:
        full = lab.full_metric(ft_loss, rec.seed)
        # an OOD gain bought with a large ID drop is flagged, not hidden
        ood = "ood_acc" if key == "id_acc" else "ood_f1"
        rec.id_collapse = (rec.metrics[ood] > full[ood]
                           and full[key] - rec.metrics[key] > lab.cfg.collapse_drop)
        _, ft_traj = lab.theta_ft(ft_loss, rec.seed)
        rec.plateau_step = plateau_step([(p.step, p.metrics[key]) for p in ft_traj], lab.cfg.plateau_patience)
    return rec


def search_from(lab: Lab, start: ParameterSnapshot, method: str, loss: str, sparsity: float, seed: int,
                selection: str, data: TrainData | None = None, provenance: dict | None = None,
                **mask_kw) -> tuple[Subnetwork, list[str]]:
    """Run one subnetwork search from ``start``; returns the subnetwork and any contract violations."""
    model = model_from_snapshot(lab.model_cfg, start)
    data = data or lab.train_data(loss, seed)
    run = lab.search_config(method, loss, sparsity, seed, selection, **mask_kw)
    prov = {"source": start.tag, **(provenance or {})}
    if method == "mask":
        sub = mask_train_run(model, data, lab.evaluator, run, prov)
        return sub, check_frozen(start, model, f"mask search from {start.tag}")
    return imp_run(model, data, lab.evaluator, run, prov), []


def isolated_finetune(lab: Lab, masks: MaskedParameterSet, loss: str, seed: int) -> tuple[list[TrajectoryPoint], int, list[str]]:
    """Rewind to θ_pt, fine-tune the masked network in isolation, select by ID dev."""
    theta_pt = lab.theta_pt()
    model = model_from_snapshot(lab.model_cfg, theta_pt)
    violations = check_rewind(model.snapshot("start"), theta_pt, masks)
    res = finetune(model, lab.train_data(loss, seed), lab.evaluator, steps=lab.cfg.ft_steps, loss=loss,
                   lr=lab.cfg.lr, weight_decay=lab.cfg.weight_decay, batch_size=lab.cfg.batch_size,
                   seed=derive_seed(seed, "isolated", loss), eval_interval=lab.cfg.eval_interval,
                   masks=masks.binary(), sparsity=sparsity_of(masks))
    step = select_checkpoint([(p.step, p.metrics[lab.cfg.metric_key]) for p in res.trajectory], "all_steps")
    return res.trajectory, step, violations


def run_single(lab: Lab, paradigm: str, method: str, search_loss: str, ft_loss: str, sparsity: float,
               seed: int) -> ExperimentRecord:
    if paradigm not in PARADIGMS:
        raise ValueError(f"unknown paradigm {paradigm!r}")
    if method not in PARADIGM_METHODS[paradigm]:
        raise ValueError(f"paradigm {paradigm} supports methods {PARADIGM_METHODS[paradigm]}, not {method!r}")
    rec = ExperimentRecord("paradigm", paradigm, method, ft_loss, search_loss, sparsity, seed)
    prov = {"paradigm": paradigm}
    if paradigm == "prune_after_ft":
        theta_ft, _ = lab.theta_ft(ft_loss, seed)
        rule = "after_0.7_tmax" if method == "mask" else "all_steps"
        sub, rec.violations = search_from(lab, theta_ft, method, search_loss, sparsity, seed, rule, provenance=prov)
        rec.trajectory, rec.selected_step = sub.trajectory, sub.selected_step
        rec.metrics = _selected_metrics(sub.trajectory, sub.selected_step)
    elif paradigm == "mask_only":
        sub, rec.violations = search_from(lab, lab.theta_pt(), "mask", search_loss, sparsity, seed, "all_steps",
                                          provenance=prov)
        rec.trajectory, rec.selected_step = sub.trajectory, sub.selected_step
        rec.metrics = _selected_metrics(sub.trajectory, sub.selected_step)
        ft_loss = None
        rec.ft_loss = ""
    else:
        if method == "imp-rw":
            sub, rec.violations = search_from(lab, lab.theta_pt(), "imp-rw", search_loss, sparsity, seed,
                                              "all_steps", provenance=prov)
        else:
            theta_ft, _ = lab.theta_ft(ft_loss, seed)
            sub, rec.violations = search_from(lab, theta_ft, "mask", search_loss, sparsity, seed, "after_0.7_tmax",
                                              provenance=prov)
        traj, step, bad = isolated_finetune(lab, extract_mask(sub), ft_loss, seed)
        rec.violations += bad
        rec.trajectory, rec.selected_step = traj, step
        rec.metrics = _selected_metrics(traj, step)
    rec.subnetwork = sub
    rec.achieved_sparsity = sparsity_of(sub.masks)
    return _finish(lab, rec, ft_loss)


def run_paradigm(lab: Lab, paradigm: str, method: str = "mask", search_loss: str = "poe", ft_loss: str = "std",
                 sparsities: Sequence[float] | None = None, seeds: Sequence[int] | None = None) -> list[ExperimentRecord]:
    sparsities = lab.cfg.sparsities if sparsities is None else sparsities
    seeds = lab.cfg.seeds if seeds is None else seeds
    return [run_single(lab, paradigm, method, search_loss, ft_loss, s, seed) for seed in seeds for s in sparsities]


def run_full_models(lab: Lab, losses: Sequence[str] = ("std", "poe"),
                    seeds: Sequence[int] | None = None) -> list[ExperimentRecord]:
    """Reference rows for the fine-tuned full models (sparsity 0, no search)."""
    out = []
    for seed in (lab.cfg.seeds if seeds is None else seeds):
        for loss in losses:
            _, traj = lab.theta_ft(loss, seed)
            rec = ExperimentRecord("full", "full", "none", loss, "", 0.0, seed, metrics=dict(traj[-1].metrics),
                                   selected_step=traj[-1].step, trajectory=traj)
            out.append(_finish(lab, rec, loss))
    return out


def run_ood_oracle(lab: Lab, sparsities: Sequence[float] | None = None,
                   seeds: Sequence[int] | None = None) -> list[ExperimentRecord]:
    """Mask training on ID train + OOD train, evaluated on the held-out OOD test split."""
    sparsities = lab.cfg.sparsities if sparsities is None else sparsities
    seeds = lab.cfg.seeds if seeds is None else seeds
    mix = lab.mixture_data()
    out = []
    for seed in seeds:
        theta_ft, _ = lab.theta_ft("std", seed)
        for s in sparsities:
            sub, bad = search_from(lab, theta_ft, "mask", "std", s, seed, "after_0.7_tmax", data=mix,
                                   provenance={"study": "oracle"})
            rec = ExperimentRecord("oracle", "prune_after_ft", "mask", "std", "std", s, seed, ORACLE_ARMS[0],
                                   violations=bad, trajectory=sub.trajectory, selected_step=sub.selected_step,
                                   metrics=_selected_metrics(sub.trajectory, sub.selected_step), subnetwork=sub,
                                   achieved_sparsity=sparsity_of(sub.masks))
            out.append(_finish(lab, rec, "std"))

            sub, bad = search_from(lab, lab.theta_pt(), "mask", "std", s, seed, "all_steps", data=mix,
                                   provenance={"study": "oracle"})
            rec = ExperimentRecord("oracle", "mask_only", "mask", "", "std", s, seed, ORACLE_ARMS[1],
                                   violations=bad, trajectory=sub.trajectory, selected_step=sub.selected_step,
                                   metrics=_selected_metrics(sub.trajectory, sub.selected_step), subnetwork=sub,
                                   achieved_sparsity=sparsity_of(sub.masks))
            out.append(_finish(lab, rec, None))

            traj, step, bad = isolated_finetune(lab, extract_mask(sub), "std", seed)
            rec = ExperimentRecord("oracle", "prune_then_ft", "mask", "std", "std", s, seed, ORACLE_ARMS[2],
                                   violations=bad, trajectory=traj, selected_step=step,
                                   metrics=_selected_metrics(traj, step), achieved_sparsity=sparsity_of(sub.masks))
            out.append(_finish(lab, rec, "std"))
    return out


def timing_steps(cfg: RunConfig) -> list[int]:
    return sorted({int(round(f * cfg.ft_steps)) for f in cfg.timing_fractions})


def run_timing_study(lab: Lab, search_loss: str = "poe", sparsity: float | None = None,
                     seeds: Sequence[int] | None = None) -> list[ExperimentRecord]:
    """Mask training launched from snapshots taken during standard fine-tuning."""
    sparsity = lab.cfg.timing_sparsity if sparsity is None else sparsity
    seeds = lab.cfg.seeds if seeds is None else seeds
    steps = timing_steps(lab.cfg)
    out = []
    for seed in seeds:
        final, _, snaps = lab.finetune_run("std", seed, snapshot_steps=steps)
        missing = [t for t in steps if t not in snaps]
        if missing:
            raise ValueError(f"fine-tuning produced no snapshot at steps {missing}")
        if not _same(snaps[lab.cfg.ft_steps], lab.theta_ft("std", seed)[0]):
            raise ContractError("final timing snapshot differs from θ_ft")
        for t in steps:
            start = lab.theta_pt() if t == 0 else snaps[t]
            rule = "all_steps" if t == 0 else "after_0.7_tmax"
            sub, bad = search_from(lab, start, "mask", search_loss, sparsity, seed, rule,
                                   provenance={"study": "timing", "start_step": str(t)})
            rec = ExperimentRecord("timing", "mask_only" if t == 0 else "prune_after_ft", "mask",
                                   "std", search_loss, sparsity, seed, f"t={t}", violations=bad,
                                   trajectory=sub.trajectory, selected_step=sub.selected_step,
                                   metrics=_selected_metrics(sub.trajectory, sub.selected_step),
                                   achieved_sparsity=sparsity_of(sub.masks))
            out.append(_finish(lab, rec, "std"))
    return out


def gradual_schedule(cfg: RunConfig, t_max: int) -> SparsitySchedule:
    return SparsitySchedule("cubic", cfg.gradual_start, cfg.gradual_target, 0,
                            max(1, int(round(cfg.gradual_end_frac * t_max))))


def run_gradual_vs_fixed(lab: Lab, search_loss: str = "poe", seeds: Sequence[int] | None = None) -> list[ExperimentRecord]:
    seeds = lab.cfg.seeds if seeds is None else seeds
    target = lab.cfg.gradual_target
    t_max = lab.cfg.search_steps
    arms = {
        "fixed-hard": dict(init="hard"),
        "fixed-soft": dict(init="soft"),
        "gradual": dict(init="soft", schedule=gradual_schedule(lab.cfg, t_max)),
    }
    out = []
    for seed in seeds:
        theta_ft, _ = lab.theta_ft("std", seed)
        for arm, kw in arms.items():
            sub, bad = search_from(lab, theta_ft, "mask", search_loss, target, seed, "after_0.7_tmax",
                                   provenance={"study": "gradual", "arm": arm}, **kw)
            rec = ExperimentRecord("gradual", "prune_after_ft", "mask", "std", search_loss, target, seed, arm,
                                   violations=bad, trajectory=sub.trajectory, selected_step=sub.selected_step,
                                   metrics=_selected_metrics(sub.trajectory, sub.selected_step),
                                   achieved_sparsity=sparsity_of(sub.masks))
            out.append(_finish(lab, rec, "std"))
    return out


def gradual_verdict(records: Sequence[ExperimentRecord], metric: str = "id_acc") -> tuple[bool, str]:
    """Compare the gradual arm's mean ID metric with the fixed-hard arm's; the text names a failure."""
    means = {}
    for arm in ("gradual", "fixed-hard"):
        vals = [r.metrics[metric] for r in records if r.study == "gradual" and r.arm == arm]
        if not vals:
            raise ValueError(f"no {arm} records")
        means[arm] = float(np.mean(vals))
    ok = means["gradual"] >= means["fixed-hard"]
    status = "holds" if ok else "FAILED"
    text = (f"gradual {metric} {means['gradual']:.6f} vs fixed-hard {means['fixed-hard']:.6f}: "
            f"gradual >= fixed-hard {status}\n")
    return ok, text


# ----------------------------------------------------------------------------
# aggregation and output


def aggregate(records: Sequence[ExperimentRecord]) -> list[dict[str, str]]:
    """Mean and standard deviation over seeds for each configuration group."""
    return aggregate_rows([r.row() for r in records])


def aggregate_rows(rows: Sequence[dict[str, str]]) -> list[dict[str, str]]:
    groups: dict[tuple, list[dict[str, str]]] = {}
    for row in rows:
        groups.setdefault(tuple(row[k] for k in GROUP_KEYS), []).append(row)
    out = []
    for key in sorted(groups):
        members = sorted(groups[key], key=lambda r: int(r["seed"]))
        agg = dict(zip(GROUP_KEYS, key))
        agg["n_seeds"] = str(len(members))
        agg["seeds"] = " ".join(r["seed"] for r in members)
        for m in METRIC_KEYS:
            vals = np.array([float(r[m]) for r in members], dtype=np.float64)
            agg[f"{m}_mean"] = f"{vals.mean():.6f}"
            agg[f"{m}_std"] = f"{vals.std(ddof=1) if len(vals) > 1 else 0.0:.6f}"
        agg["id_collapse_any"] = str(int(any(r["id_collapse"] == "1" for r in members)))
        agg["violations"] = str(sum(len([v for v in r["violations"].split(";") if v]) for r in members))
        out.append(agg)
    return out


def report_table(rows: Sequence[dict[str, str]]) -> list[dict[str, str]]:
    """Aggregate rows gathered from several runs; identical (group, seed) rows are counted once."""
    seen = {}
    for row in rows:
        seen.setdefault(tuple(row[k] for k in GROUP_KEYS) + (row["seed"],), row)
    return aggregate_rows(list(seen.values()))


def rows_to_csv(rows: Sequence[dict[str, str]]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def curves_rows(records: Sequence[ExperimentRecord]) -> list[dict[str, str]]:
    """Long-format per-evaluation rows, one series per record."""
    rows = []
    for r in records:
        for p in r.trajectory:
            row = {k: r.row()[k] for k in GROUP_KEYS}
            row["seed"] = str(r.seed)
            row["step"] = str(p.step)
            row["sparsity_now"] = f"{p.sparsity:.6f}"
            row["loss"] = f"{p.loss:.6f}"
            for m in METRIC_KEYS:
                row[m] = f"{p.metrics.get(m, float('nan')):.6f}"
            rows.append(row)
    return rows


def manifest(cfg: RunConfig, command: str) -> str:
    lines = [f"command={command}", f"config_key={_config_key(cfg)}", f"python={platform.python_version()}",
             f"numpy={np.__version__}", f"activation={cfg.activation}", f"lr={cfg.lr}", f"mask_lr={cfg.mask_lr}",
             "sparsity_denominator=prunable_without_classifier"]
    return "\n".join(lines) + "\n" + cfg.to_text()


def write_outputs(out_dir: str | Path, cfg: RunConfig, command: str, records: Sequence[ExperimentRecord]) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    (out / "manifest.txt").write_text(manifest(cfg, command), encoding="utf-8")
    (out / "records.csv").write_text(rows_to_csv([r.row() for r in records]), encoding="utf-8")
    (out / "aggregate.csv").write_text(rows_to_csv(aggregate(records)), encoding="utf-8")
    (out / "curves.csv").write_text(rows_to_csv(curves_rows(records)), encoding="utf-8")
    for i, r in enumerate(records):
        if r.subnetwork is not None:
            name = f"subnet-{r.study}-{r.paradigm}-{r.method}-{r.search_loss}-s{r.sparsity:.2f}-seed{r.seed}"
            if r.arm:
                name += "-" + r.arm.replace(" ", "_").replace("+", "plus").replace("=", "")
            sub = r.subnetwork
            ckpt.save(out / f"{name}.srnt", {}, sub.masks.to_records(), sub.provenance)
    return out


def read_records_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def export_splits(lab: Lab, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, examples in lab.splits.items():
        write_split(out / f"{name}.tsv", examples)
