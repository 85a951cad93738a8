"""End-to-end acceptance checks, one PASS/FAIL line each.

The first four checks and the determinism check take seconds to a couple of
minutes.  The three experiment checks train at the default configuration and
take tens of minutes on a single CPU core; they share one cache directory so
pretraining and full-model fine-tuning happen once.
"""

import re
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from srnet import cli
from srnet import harness as H
from srnet import tensor as T
from srnet.config import RunConfig
from srnet.data import DatasetSpec, check_disjoint, encode, generate
from srnet.debias import confreg_scale, featurize, loss_poe, loss_reweight, loss_std
from srnet.masking import MaskedParameterSet, MaskPair, binarize, recompute_threshold, ste_step
from srnet.metrics import compute_metrics
from srnet.model import Encoder, ModelConfig
from srnet.pruning import PruningRunConfig, apply_masks, imp_run
from srnet.tensor import Tape, Tensor, default_dtype
from srnet.train import Evaluator, TrainData

from conftest import TINY_OVERRIDES, tiny_config
from oracles import binarize_ref, smooth_ref, weighted_f1_ref

TESTS = Path(__file__).parent
SEEDS = (0, 1, 2, 3)
_records: list[H.ExperimentRecord] = []


def report(capsys, name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
    with capsys.disabled():
        print("\n" + line, flush=True)
    assert ok, line


@pytest.fixture(scope="module")
def lab(tmp_path_factory):
    return H.Lab(RunConfig(seeds=SEEDS), tmp_path_factory.mktemp("acceptance"))


# ----------------------------------------------------------------------------
# mechanics


def _pruned(pair: MaskPair) -> int:
    return int(pair.binary.size - np.count_nonzero(pair.binary))


def _ste_reference_error(seed: int) -> float:
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(3, 4))
    x = rng.normal(size=(5, 3))
    y = rng.integers(0, 4, size=5)
    real = rng.uniform(-0.02, 0.04, size=(3, 4))
    phi, lr = 0.01, float(rng.uniform(0.1, 2.0))
    with default_dtype(np.float64):
        masks = MaskedParameterSet({"w": MaskPair("w", real.copy(), np.ones_like(real), phi)})
        masks["w"].refresh()
        m = Tensor(masks["w"].binary, requires_grad=True)
        with Tape() as tape:
            loss = T.cross_entropy(Tensor(x) @ (Tensor(w) * m), y)
        tape.backward(loss)
        ste_step(masks, {"w": m.grad}, lr)
    mb = (real >= phi).astype(float)
    z = x @ (w * mb)
    p = np.exp(z - z.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    dm = (x.T @ ((p - np.eye(4)[y]) / len(y))) * w
    return float(np.max(np.abs(masks["w"].real - (real - lr * dm))))


def _imp_checks() -> tuple[bool, bool]:
    cfg_m = ModelConfig(n_layers=1, d_model=8, d_ffn=16, n_heads=2, vocab_size=60, max_len=24)
    sp = generate(DatasetSpec(n_train=64, n_dev=16, n_ood=16, n_ood_train=8))
    enc = {k: encode(v, cfg_m.max_len) for k, v in sp.items()}
    data, ev = TrainData(enc["id_train"]), Evaluator(enc["id_dev"], {"ood": enc["ood_test"]})

    sub = imp_run(Encoder(cfg_m, 0), data, ev,
                  PruningRunConfig(method="imp", t_max=20, delta_t=4, sparsity=0.3, eval_interval=4, lr=1e-3))
    nested = all(np.all(b[n].binary <= a[n].binary) for a, b in zip(sub.history, sub.history[1:]) for n in a)
    exact = all(_pruned(m[n]) == int(np.floor(k * 0.1 * m[n].binary.size + 1e-9))
                for k, m in enumerate(sub.history) for n in m)

    model = Encoder(cfg_m, 1)
    theta0 = model.snapshot("pt")
    sub = imp_run(model, data, ev, PruningRunConfig(method="imp-rw", t_max=20, delta_t=4, sparsity=0.3,
                                                    eval_interval=100, lr=1e-2))
    kept = apply_masks(sub.weights, sub.masks)
    rewound = sub.weights.equals(theta0) and all(
        np.array_equal(kept.params[n][sub.masks[n].binary > 0], theta0.params[n][sub.masks[n].binary > 0])
        for n in sub.masks)
    return nested and exact, rewound


def test_mechanics_exactness(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    fails = []

    phi = 0.01
    table = binarize(np.array([-1.0, 0.0, phi - 1e-9, phi, phi + 1e-9, 1.0]), phi)
    if not np.array_equal(table, [0, 0, 0, 1, 1, 1]):
        fails.append(f"truth table {table}")
    for _ in range(50):
        real = rng.choice([-0.5, 0.0, 0.005, 0.01, 0.02, 1.0], size=(4, 5))
        if not np.array_equal(binarize(real, phi), binarize_ref(real, phi)):
            fails.append("binarize vs reference")
            break

    for _ in range(200):
        shape = tuple(int(v) for v in rng.integers(1, 12, size=2))
        s = float(rng.uniform(0, 0.99))
        real = rng.choice([-0.3, 0.0, 0.1, 0.2], size=shape) if rng.random() < 0.5 else rng.normal(size=shape)
        masks = MaskedParameterSet({"w": MaskPair("w", real.astype(np.float32), np.ones(shape, np.float32))})
        recompute_threshold(masks, s)
        if _pruned(masks["w"]) != int(np.floor(s * real.size + 1e-9)):
            fails.append(f"sparsity after recompute_threshold at s={s:.3f}, shape {shape}")
            break

    ste_err = max(_ste_reference_error(seed) for seed in range(20))
    if ste_err > 1e-6:
        fails.append(f"STE error {ste_err:.2e}")

    nested, rewound = _imp_checks()
    if not nested:
        fails.append("IMP masks not nested or event sparsity off")
    if not rewound:
        fails.append("imp-rw rewind not bit-exact")

    worst = 0.0
    for _ in range(200):
        k = int(rng.integers(2, 6))
        p = rng.dirichlet(np.ones(k), size=8)
        y = rng.integers(0, k, size=8)
        worst = max(worst, float(np.max(np.abs(loss_poe(p, np.full((8, k), 1.0 / k), y) - loss_std(p, y)))))
        b1, b2 = rng.random(8), rng.random(8)
        lin = loss_reweight(p, y, b1) + loss_reweight(p, y, b2) - (2 - b1 - b2) * loss_std(p, y)
        worst = max(worst, float(np.max(np.abs(lin))))
        sm = confreg_scale(p, b1)
        worst = max(worst, float(np.max(np.abs(sm.sum(1) - 1.0))), float(np.max(np.abs(sm - smooth_ref(p, b1)))))
    if worst > 1e-6:
        fails.append(f"loss identities off by {worst:.2e}")

    elapsed = time.perf_counter() - t0
    if elapsed >= 30:
        fails.append(f"took {elapsed:.1f}s")
    detail = "; ".join(fails) if fails else f"all exact (STE max err {ste_err:.1e}, losses {worst:.1e}) in {elapsed:.1f}s"
    report(capsys, "mechanics exactness", not fails, detail)


# ----------------------------------------------------------------------------
# gradients


def test_gradient_suite(capsys):
    t0 = time.perf_counter()
    cmd = [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", "-k", "grad",
           str(TESTS / "test_tensor.py"), str(TESTS / "test_model.py")]
    proc = subprocess.run(cmd, cwd=TESTS.parent, capture_output=True, text=True)
    elapsed = time.perf_counter() - t0
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    passed = int(m.group(1)) if (m := re.search(r"(\d+) passed", tail)) else 0
    ok = proc.returncode == 0 and elapsed < 120 and passed >= 20 * 19
    report(capsys, "gradient suite", ok, f"{tail} ({elapsed:.1f}s, finite differences, rel err < 1e-3)")


# ----------------------------------------------------------------------------
# bias ceiling


def test_bias_ceiling(capsys):
    t0 = time.perf_counter()
    ids, oods = [], []
    for seed in SEEDS:
        lab = H.Lab(RunConfig(seed=seed, bias_strength=0.9))
        bm, emb = lab.bias_model()
        for split, out in (("id_dev", ids), ("ood_test", oods)):
            probs = bm.predict_proba(featurize(lab.splits[split], emb))
            out.append(float(np.mean(probs.argmax(1) == lab.enc[split].labels)))
    elapsed = time.perf_counter() - t0
    id_m, ood_m = float(np.mean(ids)), float(np.mean(oods))
    ok = abs(id_m - 0.90) <= 0.03 and abs(ood_m - 0.50) <= 0.04 and elapsed < 120
    per_seed = ", ".join(f"{a:.3f}/{b:.3f}" for a, b in zip(ids, oods))
    report(capsys, "bias ceiling", ok,
           f"ID {id_m:.3f} (0.90±0.03), OOD {ood_m:.3f} (0.50±0.04), per seed {per_seed}, {elapsed:.1f}s")


# ----------------------------------------------------------------------------
# metric oracle


def test_weighted_f1_oracle(capsys):
    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(100):
        k = int(rng.integers(2, 6))
        n = int(rng.integers(1, 200))
        gold = rng.integers(0, k, size=n)
        pred = rng.integers(0, k, size=n)
        if compute_metrics(pred, gold, k).weighted_f1 != weighted_f1_ref(pred, gold, k):
            mismatches += 1
    report(capsys, "weighted F1 oracle", mismatches == 0, f"{100 - mismatches}/100 vectors match exactly")


# ----------------------------------------------------------------------------
# determinism


def _tiny_cli_args():
    out = []
    for k, v in TINY_OVERRIDES.items():
        if isinstance(v, tuple):
            v = ",".join(map(str, v))
        out += ["--set", f"{k}={v}"]
    return out


DETERMINISM_COMMANDS = [
    ["finetune", "--loss", "poe"],
    ["search", "--method", "mask", "--loss", "poe", "--sparsity", "0.5"],
    ["search", "--method", "imp", "--loss", "reweight", "--sparsity", "0.5"],
    ["search", "--source", "pt", "--loss", "confreg", "--sparsity", "0.2"],
    ["run-paradigm", "--paradigm", "prune_then_ft", "--method", "imp-rw"],
    ["oracle"],
    ["timing"],
    ["gradual"],
]


def test_determinism(tmp_path, capsys):
    differing = []
    for args in DETERMINISM_COMMANDS:
        outputs = []
        for run in ("a", "b"):
            root = tmp_path / run
            assert cli.main(args + ["--out", str(root)] + _tiny_cli_args()) == 0
            outputs.append({p.relative_to(root): p.read_bytes() for p in root.rglob("aggregate.csv")})
        if not outputs[0] or outputs[0] != outputs[1]:
            differing.append(" ".join(args))
    for run in ("a", "b"):
        assert cli.main(["report", str(tmp_path / run)]) == 0
    if (tmp_path / "a" / "report.csv").read_bytes() != (tmp_path / "b" / "report.csv").read_bytes():
        differing.append("report")
    capsys.readouterr()
    detail = (f"{len(DETERMINISM_COMMANDS) + 1} subcommand runs byte-identical on re-run" if not differing
              else "differs: " + ", ".join(differing))
    report(capsys, "determinism", not differing, detail)


# ----------------------------------------------------------------------------
# experiments at the default configuration


def test_srnet_existence(lab, capsys):
    t0 = time.perf_counter()
    full, masked = [], []
    for seed in SEEDS:
        f = H.run_full_models(lab, ("std",), [seed])[0]
        r = H.run_single(lab, "prune_after_ft", "mask", "poe", "std", 0.5, seed)
        _records.extend([f, r])
        full.append(f.metrics)
        masked.append(r.metrics)
    elapsed = time.perf_counter() - t0
    key = lab.cfg.metric_key
    f_id, f_ood = np.mean([m[key] for m in full]), np.mean([m["ood_acc"] for m in full])
    m_id, m_ood = np.mean([m[key] for m in masked]), np.mean([m["ood_acc"] for m in masked])
    ok = m_ood >= f_ood + 0.05 and m_id >= 0.95 * f_id and elapsed < 30 * 60
    per_seed = ", ".join(f"{a['ood_acc']:.3f}->{b['ood_acc']:.3f}" for a, b in zip(full, masked))
    report(capsys, "robust subnetwork at 50% sparsity", ok,
           f"OOD {f_ood:.3f} -> {m_ood:.3f} (need +0.05), ID {m_id:.3f} vs 95% of {f_id:.3f} = {0.95 * f_id:.3f}, "
           f"OOD per seed {per_seed}, {elapsed / 60:.1f} min")


def test_ood_oracle(lab, capsys):
    t0 = time.perf_counter()
    guard_ok = True
    check_disjoint(lab.splits["ood_train"], lab.splits["ood_test"])
    with pytest.raises(ValueError):
        check_disjoint(lab.splits["ood_train"] + lab.splits["ood_test"][:1], lab.splits["ood_test"])
    mix_ids = set(lab.mixture_data().enc.example_ids)
    if mix_ids & {e.id for e in lab.splits["ood_test"]}:
        guard_ok = False
    oods = []
    for seed in SEEDS:
        theta_ft, _ = lab.theta_ft("std", seed)
        sub, bad = H.search_from(lab, theta_ft, "mask", "std", 0.5, seed, "after_0.7_tmax", data=lab.mixture_data(),
                                 provenance={"study": "oracle"})
        metrics = H._selected_metrics(sub.trajectory, sub.selected_step)
        _records.append(H.ExperimentRecord("oracle", "prune_after_ft", "mask", "std", "std", 0.5, seed,
                                           H.ORACLE_ARMS[0], metrics=metrics, violations=bad))
        oods.append(metrics["ood_acc"])
    elapsed = time.perf_counter() - t0
    mean = float(np.mean(oods))
    ok = guard_ok and mean >= 0.95 and elapsed < 30 * 60
    report(capsys, "OOD oracle at 50% sparsity", ok,
           f"OOD {mean:.3f} (need 0.95), per seed {', '.join(f'{v:.3f}' for v in oods)}, "
           f"leak guard {'ok' if guard_ok else 'BROKEN'}, {elapsed / 60:.1f} min")


def test_gradual_sparsity(lab, tmp_path, capsys):
    t0 = time.perf_counter()
    records = H.run_gradual_vs_fixed(lab, "poe", SEEDS)
    _records.extend(records)
    out = H.write_outputs(tmp_path / "gradual", lab.cfg, "gradual", records)
    holds, verdict = H.gradual_verdict(records, lab.cfg.metric_key)
    (out / "gradual_check.txt").write_text(verdict, encoding="utf-8")
    elapsed = time.perf_counter() - t0
    emitted = (out / "aggregate.csv").stat().st_size > 0
    with capsys.disabled():
        for row in H.aggregate(records):
            print(f"\n  {row['arm']}: ID {row['id_acc_mean']}±{row['id_acc_std']}  "
                  f"OOD {row['ood_acc_mean']}±{row['ood_acc_std']}", end="")
    ok = holds and emitted and elapsed < 45 * 60
    report(capsys, "gradual sparsity at 90%", ok, f"{verdict.strip()}, {elapsed / 60:.1f} min")


# ----------------------------------------------------------------------------
# paradigm contracts


def test_paradigm_contracts(tmp_path, capsys):
    sweep_cfg = tiny_config(seeds=SEEDS, sparsities=(0.2, 0.5, 0.7, 0.9))
    lab = H.Lab(sweep_cfg, tmp_path)
    pt_before = lab.theta_pt().copy()
    records = []
    for paradigm, method in (("prune_after_ft", "mask"), ("prune_after_ft", "imp"), ("prune_then_ft", "mask"),
                             ("prune_then_ft", "imp-rw"), ("mask_only", "mask")):
        records += H.run_paradigm(lab, paradigm, method, "poe", "std")
    records += H.run_ood_oracle(lab, sparsities=(0.5,))
    records += H.run_timing_study(lab)
    records += H.run_gradual_vs_fixed(lab)
    all_records = records + _records
    n_bad = sum(len(r.violations) for r in all_records)
    pt_kept = lab.theta_pt().equals(pt_before)
    try:
        H.assert_contracts(all_records)
        raised = False
    except H.ContractError:
        raised = True
    ok = n_bad == 0 and not raised and pt_kept
    report(capsys, "paradigm contracts", ok,
           f"{n_bad} violations over {len(all_records)} runs "
           f"({len(records)} sweep runs over 4 seeds and 4 sparsities, {len(_records)} default-scale runs)")
