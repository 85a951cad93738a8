import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from srnet.data import (
    AGR, N_SPECIAL, DatasetSpec, Example, check_disjoint, class_distribution, encode, generate,
    iterate_batches, pretrain_corpus, read_split, write_split,
)
from srnet.debias import featurize, toy_embeddings, train_bias_model

SMALL = dict(n_train=2000, n_dev=200, n_ood=400, n_ood_train=200)


def rule_label(spec, e):
    """The true labelling rule, computed from the raw tokens."""
    u = [t for t in e.tokens_a if N_SPECIAL <= t < N_SPECIAL + spec.n_markers]
    assert len(u) == 1
    want = u[0] + spec.n_markers
    b = e.tokens_b
    return int(any(b[i] == AGR and b[i + 1] == want for i in range(len(b) - 1)))


def content_overlap(spec, e):
    b = [t for t in e.tokens_b if t >= spec.first_content]
    return sum(t in set(e.tokens_a) for t in b) / len(b)


@pytest.fixture(scope="module")
def splits():
    spec = DatasetSpec(**SMALL)
    return spec, generate(spec)


def test_generation_is_deterministic():
    spec = DatasetSpec(n_train=50, n_dev=10, n_ood=10, n_ood_train=10, seed=4)
    assert generate(spec) == generate(spec)
    assert generate(spec) != generate(DatasetSpec(n_train=50, n_dev=10, n_ood=10, n_ood_train=10, seed=5))


def test_true_rule_solves_every_split(splits):
    spec, sp = splits
    for name, exs in sp.items():
        assert all(rule_label(spec, e) == e.label for e in exs), name


def test_overlap_bands(splits):
    spec, sp = splits
    for e in sp["id_train"]:
        high = (e.label == 1) == e.bias_aligned
        ov = content_overlap(spec, e)
        assert ov >= 0.8 if high else ov <= 0.2
    assert all(content_overlap(spec, e) == 1.0 for e in sp["ood_test"])


def test_bias_alignment_rate(splits):
    spec, sp = splits
    for y in (0, 1):
        rows = [e for e in sp["id_train"] if e.label == y]
        assert abs(np.mean([e.bias_aligned for e in rows]) - 0.9) < 0.03


def test_ood_is_exactly_balanced(splits):
    _, sp = splits
    assert class_distribution(sp["ood_test"]) == [0.5, 0.5]


def test_imbalanced_ood_variant():
    spec = DatasetSpec(n_train=10, n_dev=10, n_ood=1000, n_ood_train=10, ood_positive_fraction=0.282)
    frac = class_distribution(generate(spec)["ood_test"], 2)
    assert abs(frac[1] - 0.282) <= 1 / 1000


def test_class_distribution_empty():
    with pytest.raises(ValueError):
        class_distribution([])


@pytest.mark.parametrize("rho,id_lo,id_hi", [(1.0, 0.99, 1.0), (0.5, 0.44, 0.56)])
def test_bias_model_oracle(rho, id_lo, id_hi):
    spec = DatasetSpec(bias_strength=rho, **SMALL)
    sp = generate(spec)
    emb = toy_embeddings(spec.vocab_size)
    bm = train_bias_model(featurize(sp["id_train"], emb), [e.label for e in sp["id_train"]], 2, steps=300)
    acc = lambda exs: np.mean(bm.predict_proba(featurize(exs, emb)).argmax(1) == [e.label for e in exs])
    assert id_lo <= acc(sp["id_dev"]) <= id_hi
    assert abs(acc(sp["ood_test"]) - 0.5) < 0.06


def test_three_class_variant():
    spec = DatasetSpec(n_classes=3, **SMALL)
    sp = generate(spec)
    assert all(e.label in (0, 1, 2) for e in sp["id_train"])
    for e in sp["id_train"]:
        if e.label == 2:
            i = e.tokens_b.index(AGR)
            assert e.tokens_b[i + 1] >= spec.first_content


def test_invalid_specs():
    with pytest.raises(ValueError):
        DatasetSpec(bias_strength=0.3)
    with pytest.raises(ValueError):
        DatasetSpec(n_classes=4)
    with pytest.raises(ValueError):
        DatasetSpec(vocab_size=30)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.booleans(), st.integers(0, 2))
def test_examples_fit_and_hold_one_bigram(seed, at_start, n_dis):
    spec = DatasetSpec(n_train=20, n_dev=2, n_ood=2, n_ood_train=2, seed=seed, bigram_at_start=at_start,
                       n_distractors=(n_dis, n_dis))
    for e in generate(spec)["id_train"]:
        assert len(e.tokens_a) + len(e.tokens_b) + 3 <= spec.max_pair_len
        assert e.tokens_b.count(AGR) == 1
        if at_start:
            assert e.tokens_b[0] == AGR
        assert rule_label(spec, e) == e.label


def test_pretrain_corpus_is_task_free():
    spec = DatasetSpec()
    corpus = pretrain_corpus(spec, 4000, 0)
    match = np.mean([rule_label(spec, e) for e in corpus])
    assert abs(match - 1 / spec.n_markers) < 0.03
    high = np.array([content_overlap(spec, e) >= 0.8 for e in corpus])
    lab = np.array([rule_label(spec, e) for e in corpus])
    assert abs(high[lab == 1].mean() - high[lab == 0].mean()) < 0.08


def test_split_roundtrip(tmp_path, splits):
    _, sp = splits
    write_split(tmp_path / "x.tsv", sp["id_dev"])
    assert read_split(tmp_path / "x.tsv") == sp["id_dev"]


def test_leak_guard():
    a = [Example("a-1", (5,), (6,), 0, True)]
    with pytest.raises(ValueError):
        check_disjoint(a, a)
    check_disjoint(a, [Example("b-1", (5,), (6,), 0, True)])


def test_encode_layout_and_overflow(splits):
    _, sp = splits
    enc = encode(sp["id_dev"][:3], 24)
    e = sp["id_dev"][0]
    n = len(e.tokens_a) + len(e.tokens_b) + 3
    assert enc.lengths[0] == n
    assert enc.ids[0, 0] == 1 and enc.ids[0, len(e.tokens_a) + 1] == 2
    assert enc.segments[0, n - 1] == 1 and enc.segments[0, 1] == 0
    with pytest.raises(ValueError):
        encode(sp["id_dev"][:1], 5)


def test_iterate_batches_covers_epoch():
    it = iterate_batches(10, 4, np.random.default_rng(0))
    first = np.concatenate([next(it) for _ in range(3)])
    assert sorted(first) == list(range(10))
