"""Synthetic sentence-pair datasets with an injected lexical-overlap bias.

Token layout for a vocabulary of size V with M marker classes::

    0 PAD | 1 CLS | 2 SEP | 3 MASK | 4 AGR | u_0..u_{M-1} | v_0..v_{M-1} | content...

Sentence ``a`` holds distinct content tokens plus one marker ``u_i``.
Sentence ``b`` opens with the agreement bigram ``AGR v_j`` (or carries it at a
random position when ``bigram_at_start`` is off), followed by content tokens
and ``n_distractors`` stray ``v`` markers that never directly follow ``AGR``.
The label is 1 exactly when ``j == i``; for K=3 the extra class 2 means ``b``
carries no marker at all (``AGR`` is followed by a fresh content token).

The spurious feature is lexical overlap.  High-overlap ``b`` draws every
content token from ``a``; low-overlap ``b`` shares at most ``low_overlap`` of
its content tokens with ``a``.
In-distribution splits align high overlap with label 1 at rate ``bias_strength``;
the OOD splits are all high overlap, so overlap carries no label information.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .seeding import rng_for

PAD, CLS, SEP, MASK, AGR = 0, 1, 2, 3, 4
N_SPECIAL = 5


@dataclass(frozen=True)
class Example:
    id: str
    tokens_a: tuple[int, ...]
    tokens_b: tuple[int, ...]
    label: int
    bias_aligned: bool


@dataclass(frozen=True)
class DatasetSpec:
    vocab_size: int = 60
    n_train: int = 10_000
    n_dev: int = 1_000
    n_ood: int = 2_000
    n_ood_train: int = 2_000
    bias_strength: float = 0.9
    n_classes: int = 2
    seed: int = 0
    n_markers: int = 8
    a_len: tuple[int, int] = (6, 8)
    b_len: tuple[int, int] = (4, 6)
    ood_positive_fraction: float = 0.5
    low_overlap: float = 0.2
    n_distractors: tuple[int, int] = (1, 1)
    bigram_at_start: bool = True

    def __post_init__(self):
        if not 0.5 <= self.bias_strength <= 1.0:
            raise ValueError("bias_strength must lie in [0.5, 1]")
        if self.n_classes not in (2, 3):
            raise ValueError("n_classes must be 2 or 3")
        if self.n_markers < 2:
            raise ValueError("need at least two marker classes")
        if not 0.0 < self.ood_positive_fraction < 1.0:
            raise ValueError("ood_positive_fraction must lie in (0, 1)")
        if self.a_len[0] < self.b_len[1]:
            raise ValueError("a_len must be at least b_len so high-overlap b fits inside a")
        if self.n_content < self.a_len[1] + self.b_len[1]:
            raise ValueError(
                f"vocab_size {self.vocab_size} leaves {self.n_content} content tokens; "
                f"need {self.a_len[1] + self.b_len[1]} to realise low overlap"
            )

    @property
    def first_content(self) -> int:
        return N_SPECIAL + 2 * self.n_markers

    @property
    def n_content(self) -> int:
        return self.vocab_size - self.first_content

    def u_marker(self, i: int) -> int:
        return N_SPECIAL + i

    def v_marker(self, i: int) -> int:
        return N_SPECIAL + self.n_markers + i

    @property
    def max_pair_len(self) -> int:
        return (self.a_len[1] + 1) + (self.b_len[1] + 2 + self.n_distractors[1]) + 3


def make_example(spec: DatasetSpec, rng: np.random.Generator, ex_id: str, label: int,
                 high: bool, bias_aligned: bool) -> Example:
    content = np.arange(spec.first_content, spec.vocab_size)
    n_a = int(rng.integers(spec.a_len[0], spec.a_len[1] + 1))
    a_content = rng.choice(content, n_a, replace=False)
    i = int(rng.integers(spec.n_markers))
    a = list(a_content)
    a.insert(int(rng.integers(0, n_a + 1)), spec.u_marker(i))

    n_c = int(rng.integers(spec.b_len[0], spec.b_len[1] + 1))
    if high:
        b = list(rng.choice(a_content, n_c, replace=False))
    else:
        k_max = math.floor(spec.low_overlap * n_c + 1e-9)
        k = int(rng.integers(0, k_max + 1))
        fresh_pool = np.setdiff1d(content, a_content, assume_unique=True)
        b = list(rng.choice(a_content, k, replace=False)) + list(rng.choice(fresh_pool, n_c - k, replace=False))
        rng.shuffle(b)

    if label == 1:
        second = spec.v_marker(i)
    elif label == 0:
        j = int(rng.integers(spec.n_markers - 1))
        second = spec.v_marker(j if j < i else j + 1)
    else:
        pool = np.setdiff1d(content, np.concatenate([a_content, np.asarray(b, dtype=np.int64)]))
        second = int(rng.choice(pool))
    pos = 0 if spec.bigram_at_start else int(rng.integers(0, n_c + 1))
    b[pos:pos] = [AGR, second]
    for _ in range(int(rng.integers(spec.n_distractors[0], spec.n_distractors[1] + 1))):
        # a stray v marker anywhere except directly after AGR
        slots = [q for q in range(len(b) + 1) if (q == 0 and not spec.bigram_at_start) or (q > 0 and b[q - 1] != AGR)]
        q = slots[int(rng.integers(len(slots)))]
        b.insert(q, spec.v_marker(int(rng.integers(spec.n_markers))))
    return Example(ex_id, tuple(int(t) for t in a), tuple(int(t) for t in b), int(label), bool(bias_aligned))


def _balanced_labels(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    labels = np.arange(n) % k
    rng.shuffle(labels)
    return labels


def _id_split(spec: DatasetSpec, name: str, n: int) -> list[Example]:
    rng = rng_for(spec.seed, "data", name)
    labels = _balanced_labels(rng, n, spec.n_classes)
    out = []
    for idx, y in enumerate(labels):
        aligned = bool(rng.random() < spec.bias_strength)
        high = (y == 1) == aligned
        out.append(make_example(spec, rng, f"{name}-{idx:06d}", int(y), high, aligned))
    return out


def _ood_split(spec: DatasetSpec, name: str, n: int) -> list[Example]:
    rng = rng_for(spec.seed, "data", name)
    n_pos = int(round(n * spec.ood_positive_fraction))
    labels = np.array([1] * n_pos + [0] * (n - n_pos))
    rng.shuffle(labels)
    return [make_example(spec, rng, f"{name}-{idx:06d}", int(y), True, bool(y == 1))
            for idx, y in enumerate(labels)]


def generate(spec: DatasetSpec) -> dict[str, list[Example]]:
    """All splits for ``spec``; identical output for identical specs."""
    return {
        "id_train": _id_split(spec, "id_train", spec.n_train),
        "id_dev": _id_split(spec, "id_dev", spec.n_dev),
        "ood_test": _ood_split(spec, "ood_test", spec.n_ood),
        "ood_train": _ood_split(spec, "ood_train", spec.n_ood_train),
    }


def pretrain_corpus(spec: DatasetSpec, n: int, seed: int) -> list[Example]:
    """Task-free text for masked-token pretraining.

    The ``b`` marker is drawn uniformly and independently of ``a``'s marker and
    overlap is a fair coin, so neither the labelling rule nor the spurious
    correlation can be read off the corpus.
    """
    rng = rng_for(seed, "pretrain-corpus")
    out = []
    for idx in range(n):
        y = int(rng.random() < 1.0 / spec.n_markers)
        high = bool(rng.random() < 0.5)
        out.append(make_example(spec, rng, f"corpus-{idx:06d}", y, high, high == (y == 1)))
    return out


def class_distribution(examples: Sequence[Example], n_classes: int | None = None) -> list[float]:
    if not examples:
        raise ValueError("class_distribution of an empty split")
    labels = np.array([e.label for e in examples])
    k = n_classes or int(labels.max()) + 1
    return (np.bincount(labels, minlength=k) / len(labels)).tolist()


def overlap_fraction(a: Sequence[int], b: Sequence[int]) -> float:
    sa = set(a)
    return sum(t in sa for t in b) / len(b)


def check_disjoint(train: Iterable[Example], test: Iterable[Example]) -> None:
    """Leak guard: raise when any example id appears in both collections."""
    shared = {e.id for e in train} & {e.id for e in test}
    if shared:
        raise ValueError(f"{len(shared)} example ids shared between training pool and test split, "
                         f"e.g. {sorted(shared)[0]}")


# ----------------------------------------------------------------------------
# serialization


def write_split(path: str | Path, examples: Iterable[Example]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for e in examples:
            a = " ".join(map(str, e.tokens_a))
            b = " ".join(map(str, e.tokens_b))
            f.write(f"{e.id}\t{a}\t{b}\t{e.label}\t{int(e.bias_aligned)}\n")


def read_split(path: str | Path) -> list[Example]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            ex_id, a, b, label, aligned = line.rstrip("\n").split("\t")
            out.append(Example(ex_id, tuple(map(int, a.split())), tuple(map(int, b.split())),
                               int(label), aligned == "1"))
    return out


# ----------------------------------------------------------------------------
# model inputs


@dataclass
class Encoded:
    """Padded ``[CLS] a [SEP] b [SEP]`` id matrix for a split."""

    ids: np.ndarray
    segments: np.ndarray
    lengths: np.ndarray
    labels: np.ndarray
    example_ids: list[str]

    def __len__(self) -> int:
        return len(self.labels)

    def batch(self, index: np.ndarray) -> "Batch":
        t = int(self.lengths[index].max())
        ids = self.ids[index, :t]
        return Batch(ids, self.segments[index, :t], ids != PAD, self.labels[index], index)


@dataclass
class Batch:
    ids: np.ndarray
    segments: np.ndarray
    attention: np.ndarray
    labels: np.ndarray
    index: np.ndarray


def encode_pair(a: Sequence[int], b: Sequence[int]) -> tuple[list[int], list[int]]:
    ids = [CLS, *a, SEP, *b, SEP]
    seg = [0] * (len(a) + 2) + [1] * (len(b) + 1)
    return ids, seg


def encode(examples: Sequence[Example], max_len: int) -> Encoded:
    n = len(examples)
    ids = np.full((n, max_len), PAD, dtype=np.int64)
    seg = np.zeros((n, max_len), dtype=np.int64)
    lengths = np.zeros(n, dtype=np.int64)
    for r, e in enumerate(examples):
        row, srow = encode_pair(e.tokens_a, e.tokens_b)
        if len(row) > max_len:
            raise ValueError(f"example {e.id} encodes to {len(row)} tokens > max_len {max_len}")
        ids[r, : len(row)] = row
        seg[r, : len(row)] = srow
        lengths[r] = len(row)
    labels = np.array([e.label for e in examples], dtype=np.int64)
    return Encoded(ids, seg, lengths, labels, [e.id for e in examples])


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterable[np.ndarray]:
    """Endless stream of shuffled index batches; each epoch is a fresh permutation."""
    while True:
        perm = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield perm[start:start + batch_size]
        rem = n % batch_size
        if rem:
            yield perm[n - rem:]
