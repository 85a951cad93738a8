"""Bias model, bias degree and the four training objectives.

Probability-level losses (``loss_std`` ... ``loss_confreg``) operate on plain
arrays and clamp probabilities at ``EPS`` before taking logs.  The training
path, :func:`training_loss`, works from logits through the tensor core and
uses ``log_softmax`` for the main model's log-probabilities.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Example
from .optim import OptimizerState, adamw_step, zero_grad
from .seeding import rng_for
from .tensor import Tape, Tensor

EPS = 1e-12
LOSSES = ("std", "poe", "reweight", "confreg")


def _onehot(y, k: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim and y.shape[-1] == k and y.dtype.kind == "f":
        return y.astype(np.float64)
    return np.eye(k)[y.astype(np.int64)]


def _log(p) -> np.ndarray:
    return np.log(np.maximum(np.asarray(p, dtype=np.float64), EPS))


def loss_std(p_m, y):
    p_m = np.asarray(p_m, dtype=np.float64)
    return -(_onehot(y, p_m.shape[-1]) * _log(p_m)).sum(axis=-1)


def loss_poe(p_m, p_b, y):
    p_m = np.asarray(p_m, dtype=np.float64)
    z = _log(p_m) + _log(p_b)
    z = z - z.max(axis=-1, keepdims=True)
    log_combined = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return -(_onehot(y, p_m.shape[-1]) * log_combined).sum(axis=-1)


def loss_reweight(p_m, y, beta):
    return (1.0 - np.asarray(beta, dtype=np.float64)) * loss_std(p_m, y)


def confreg_scale(p_t, beta) -> np.ndarray:
    """Teacher distribution raised to ``1 - beta`` and renormalised."""
    p_t = np.asarray(p_t, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if p_t.ndim == 2 and beta.ndim == 1:
        beta = beta[:, None]
    scaled = np.exp((1.0 - beta) * _log(p_t))
    return scaled / scaled.sum(axis=-1, keepdims=True)


def loss_confreg(p_m, p_t, beta):
    return -(confreg_scale(p_t, beta) * _log(p_m)).sum(axis=-1)


def bias_degree(p_b: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Bias-model probability of the gold class, per example."""
    p_b = np.asarray(p_b)
    return p_b[np.arange(len(p_b)), np.asarray(labels, dtype=np.int64)]


def training_loss(selector: str, logits: Tensor, labels: np.ndarray, bias_probs: np.ndarray | None = None,
                  teacher_probs: np.ndarray | None = None) -> Tensor:
    """Batch-mean objective ``selector`` from main-model logits."""
    if selector == "std":
        return T.cross_entropy(logits, labels)
    if selector not in LOSSES:
        raise ValueError(f"unknown loss {selector!r}")
    if bias_probs is None:
        raise ValueError(f"loss {selector!r} needs bias-model probabilities")
    if selector == "poe":
        combined = T.log_softmax(logits, axis=-1) + Tensor(_log(bias_probs))
        return T.cross_entropy(combined, labels)
    beta = bias_degree(bias_probs, labels)
    if selector == "reweight":
        return T.cross_entropy(logits, labels, weights=1.0 - beta)
    if teacher_probs is None:
        raise ValueError("confreg needs teacher probabilities")
    return T.cross_entropy(logits, confreg_scale(teacher_probs, beta))


# ----------------------------------------------------------------------------
# spurious features


def toy_embeddings(vocab_size: int, dim: int = 32, seed: int = 0) -> np.ndarray:
    """Deterministic pseudo-random unit vectors, one per token id."""
    v = rng_for(seed, "toy-embeddings").normal(size=(vocab_size, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _is_contiguous(a: Sequence[int], b: Sequence[int]) -> bool:
    n = len(b)
    return any(tuple(a[i:i + n]) == tuple(b) for i in range(len(a) - n + 1))


def extract_overlap_features(a: Sequence[int], b: Sequence[int], emb: np.ndarray) -> np.ndarray:
    """Five lexical-overlap features of ``b`` (hypothesis) against ``a`` (premise)."""
    if not len(a) or not len(b):
        raise ValueError("overlap features need non-empty sequences")
    sa = set(a)
    in_a = [t in sa for t in b]
    ea = emb[list(a)]
    eb = emb[list(b)]
    ea = ea / np.maximum(np.linalg.norm(ea, axis=1, keepdims=True), EPS)
    eb = eb / np.maximum(np.linalg.norm(eb, axis=1, keepdims=True), EPS)
    best = (eb @ ea.T).max(axis=1)
    return np.array([
        float(all(in_a)),
        float(_is_contiguous(a, b)),
        sum(in_a) / len(b),
        float(best.mean()),
        float(best.min()),
    ])


def extract_claim_features(b: Sequence[int], emb: np.ndarray) -> np.ndarray:
    if not len(b):
        raise ValueError("claim features need a non-empty sequence")
    return emb[list(b)].max(axis=0)


def featurize(examples: Sequence[Example], emb: np.ndarray, kind: str = "overlap") -> np.ndarray:
    if kind == "overlap":
        return np.stack([extract_overlap_features(e.tokens_a, e.tokens_b, emb) for e in examples])
    if kind == "claim":
        return np.stack([extract_claim_features(e.tokens_b, emb) for e in examples])
    raise ValueError(f"unknown feature kind {kind!r}")


# ----------------------------------------------------------------------------
# bias model


@dataclass
class BiasModel:
    weight: np.ndarray
    bias: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    prior: np.ndarray | None = None

    @property
    def n_classes(self) -> int:
        return self.bias.shape[0]

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        features = np.atleast_2d(features)
        if self.prior is not None:
            return np.tile(self.prior, (len(features), 1))
        z = ((features - self.mean) / self.scale) @ self.weight + self.bias
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)


def train_bias_model(features: np.ndarray, labels: np.ndarray, n_classes: int, steps: int = 1000,
                     lr: float = 0.05, seed: int = 0) -> BiasModel:
    """Linear softmax classifier on standardised features, full-batch AdamW."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_feat = features.shape[1]
    mean = features.mean(axis=0)
    std = features.std(axis=0)
    if np.all(std < 1e-12):
        warnings.warn("bias features are constant; bias model falls back to the class prior")
        prior = np.bincount(labels, minlength=n_classes) / len(labels)
        return BiasModel(np.zeros((n_feat, n_classes)), np.zeros(n_classes), mean, np.ones(n_feat), prior)
    scale = np.where(std < 1e-12, 1.0, std)
    x = (features - mean) / scale
    with T.default_dtype(np.float64):
        rng = rng_for(seed, "bias-model")
        params = {"weight": Tensor(rng.normal(0.0, 0.01, size=(n_feat, n_classes)), requires_grad=True),
                  "bias": Tensor(np.zeros(n_classes), requires_grad=True)}
        xt = Tensor(x)
        state = OptimizerState(lr=lr, weight_decay=0.0)
        for _ in range(steps):
            zero_grad(params)
            with Tape() as tape:
                loss = T.cross_entropy(xt @ params["weight"] + params["bias"], labels)
            tape.backward(loss)
            adamw_step(params, state)
    return BiasModel(params["weight"].data.copy(), params["bias"].data.copy(), mean, scale)


# ----------------------------------------------------------------------------
# caches


def cache_precision(probs: np.ndarray) -> np.ndarray:
    """Round to the 9 significant digits the probability cache stores."""
    return np.vectorize(lambda v: float(f"{v:.9g}"), otypes=[np.float64])(np.asarray(probs, dtype=np.float64))


def write_prob_cache(path: str | Path, example_ids: Sequence[str], probs: np.ndarray,
                     beta: np.ndarray | None = None) -> None:
    probs = np.asarray(probs)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        header = ["id"] + [f"p{k}" for k in range(probs.shape[1])] + (["beta"] if beta is not None else [])
        w.writerow(header)
        for i, ex_id in enumerate(example_ids):
            row = [ex_id] + [f"{v:.9g}" for v in probs[i]]
            if beta is not None:
                row.append(f"{beta[i]:.9g}")
            w.writerow(row)


def read_prob_cache(path: str | Path) -> tuple[list[str], np.ndarray, np.ndarray | None]:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    header, body = rows[0], rows[1:]
    has_beta = header[-1] == "beta"
    k = len(header) - 1 - int(has_beta)
    ids = [r[0] for r in body]
    probs = np.array([[float(v) for v in r[1:1 + k]] for r in body]).reshape(len(body), k)
    beta = np.array([float(r[-1]) for r in body]) if has_beta else None
    return ids, probs, beta
