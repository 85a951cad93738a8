import numpy as np
import pytest

from srnet import harness as H
from srnet.model import model_from_snapshot
from srnet.masking import MaskedParameterSet

from conftest import tiny_config


@pytest.fixture(scope="module")
def lab(tmp_path_factory):
    return H.Lab(tiny_config(), tmp_path_factory.mktemp("lab"))


@pytest.mark.parametrize("paradigm,method", [
    ("prune_after_ft", "mask"), ("prune_after_ft", "imp"), ("prune_then_ft", "mask"),
    ("prune_then_ft", "imp-rw"), ("mask_only", "mask"),
])
def test_paradigms_hold_their_contracts(lab, paradigm, method):
    pt_before = lab.theta_pt().copy()
    ft_before = lab.theta_ft("std", 0)[0].copy()
    records = H.run_paradigm(lab, paradigm, method, "poe", "std", seeds=[0])
    assert len(records) == 2
    H.assert_contracts(records)
    assert lab.theta_pt().equals(pt_before)
    assert lab.theta_ft("std", 0)[0].equals(ft_before)
    for r in records:
        assert abs(r.achieved_sparsity - r.sparsity) < 0.02
        assert r.selected_step in {p.step for p in r.trajectory}
        assert set(H.METRIC_KEYS) <= set(r.metrics)


def test_unknown_paradigm_or_method(lab):
    with pytest.raises(ValueError):
        H.run_single(lab, "prune_before_ft", "mask", "poe", "std", 0.5, 0)
    with pytest.raises(ValueError):
        H.run_single(lab, "mask_only", "imp", "poe", "std", 0.5, 0)


def test_contract_checks_detect_violations(lab):
    pt = lab.theta_pt()
    model = model_from_snapshot(lab.model_cfg, pt)
    assert H.check_frozen(pt, model, "x") == []
    model.params["layers.0.ffn.W_in"].data[0, 0] += 1.0
    assert H.check_frozen(pt, model, "x")
    masks = MaskedParameterSet.ones({n: pt.params[n].shape for n in model.prunable})
    assert H.check_rewind(pt, pt, masks) == []
    moved = model.snapshot()
    assert H.check_rewind(moved, pt, masks)
    masks["layers.0.ffn.W_in"].binary[0, 0] = 0.0  # a pruned position may differ
    assert H.check_rewind(moved, pt, masks) == []
    rec = H.ExperimentRecord("s", "p", "m", "std", "poe", 0.5, 0, violations=["boom"])
    with pytest.raises(H.ContractError):
        H.assert_contracts([rec])


def test_oracle_study_arms_and_leak_guard(lab):
    records = H.run_ood_oracle(lab, sparsities=[0.5], seeds=[0])
    assert [r.arm for r in records] == list(H.ORACLE_ARMS)
    H.assert_contracts(records)
    ids = set(lab.mixture_data().enc.example_ids)
    assert not ids & set(lab.enc["ood_test"].example_ids)
    assert ids >= set(lab.enc["ood_train"].example_ids)


def test_leak_guard_rejects_overlapping_splits(tiny_cfg, monkeypatch):
    lab = H.Lab(tiny_cfg)
    lab.splits["ood_train"] = lab.splits["ood_train"] + lab.splits["ood_test"][:1]
    with pytest.raises(ValueError):
        lab.mixture_data()


def test_timing_study(lab):
    records = H.run_timing_study(lab, "poe", seeds=[0])
    steps = H.timing_steps(lab.cfg)
    assert steps[0] == 0 and steps[-1] == lab.cfg.ft_steps
    assert [r.arm for r in records] == [f"t={t}" for t in steps]
    assert records[0].paradigm == "mask_only"
    H.assert_contracts(records)


def test_gradual_vs_fixed(lab):
    records = H.run_gradual_vs_fixed(lab, "poe", seeds=[0])
    assert [r.arm for r in records] == list(H.GRADUAL_ARMS)
    for r in records:
        assert r.sparsity == 0.9
        assert abs(r.achieved_sparsity - 0.9) < 0.02
    sched = H.gradual_schedule(lab.cfg, 100)
    assert (sched.s_start, sched.s_final, sched.t_end) == (0.7, 0.9, 50)
    ok, text = H.gradual_verdict(records)
    by_arm = {r.arm: r.metrics["id_acc"] for r in records}
    assert ok == (by_arm["gradual"] >= by_arm["fixed-hard"])
    assert ("holds" if ok else "FAILED") in text


def test_gradual_verdict_flags_a_loss():
    def rec(arm, acc):
        return H.ExperimentRecord("gradual", "prune_after_ft", "mask", "std", "poe", 0.9, 0, arm,
                                  metrics={"id_acc": acc})
    ok, text = H.gradual_verdict([rec("gradual", 0.6), rec("fixed-hard", 0.7)])
    assert not ok and "FAILED" in text
    ok, text = H.gradual_verdict([rec("gradual", 0.7), rec("fixed-hard", 0.7)])
    assert ok and "holds" in text
    with pytest.raises(ValueError):
        H.gradual_verdict([rec("gradual", 0.7)])


def test_full_models_and_aggregation(lab):
    records = H.run_full_models(lab, ("std", "poe"), seeds=[0, 1])
    agg = H.aggregate(records)
    assert [a["ft_loss"] for a in agg] == ["poe", "std"]
    assert all(a["n_seeds"] == "2" for a in agg)
    ids = [float(r.row()["id_acc"]) for r in records if r.ft_loss == "std"]
    row = [a for a in agg if a["ft_loss"] == "std"][0]
    assert float(row["id_acc_mean"]) == pytest.approx(np.mean(ids), abs=1e-6)
    assert float(row["id_acc_std"]) == pytest.approx(np.std(ids, ddof=1), abs=1e-6)
    # report de-duplicates identical (group, seed) rows
    rows = [r.row() for r in records]
    assert H.report_table(rows + rows) == H.aggregate_rows(rows)


def test_lab_cache_roundtrip(tmp_path):
    cfg = tiny_config()
    a = H.Lab(cfg, tmp_path)
    pt = a.theta_pt()
    ft, traj = a.theta_ft("std", 0)
    bias = a.bias_probs()
    b = H.Lab(cfg, tmp_path)
    assert b.theta_pt().equals(pt)
    ft2, traj2 = b.theta_ft("std", 0)
    assert ft2.equals(ft) and [p.metrics for p in traj2] == [p.metrics for p in traj]
    np.testing.assert_array_equal(b.bias_probs(), bias)
    # a fresh, uncached lab computes the same artefacts
    c = H.Lab(cfg)
    assert c.theta_pt().equals(pt)
    np.testing.assert_array_equal(c.bias_probs(), bias)


def test_write_outputs(lab, tmp_path):
    records = H.run_paradigm(lab, "mask_only", "mask", "poe", "std", sparsities=[0.5], seeds=[0])
    out = H.write_outputs(tmp_path / "run", lab.cfg, "test", records)
    names = {p.name for p in out.iterdir()}
    assert {"config.txt", "manifest.txt", "records.csv", "aggregate.csv", "curves.csv"} <= names
    assert any(n.endswith(".srnt") for n in names)
    rows = H.read_records_csv(out / "records.csv")
    assert rows == [records[0].row()]


def test_collapse_flag_needs_ood_gain_and_id_drop(lab):
    full = lab.full_metric("std", 0)

    def flagged(id_delta, ood_delta):
        rec = H.ExperimentRecord("paradigm", "prune_after_ft", "mask", "std", "poe", 0.5, 0,
                                 metrics={"id_acc": full["id_acc"] + id_delta,
                                          "ood_acc": full["ood_acc"] + ood_delta})
        return H._finish(lab, rec, "std").id_collapse

    assert flagged(-0.2, 0.05)
    assert not flagged(-0.05, 0.05)
    assert not flagged(-0.2, -0.01)
    assert not flagged(0.0, 0.3)
