"""A small BERT-shaped encoder whose prunable matrices are explicit."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import MASK, N_SPECIAL, Batch, Encoded, encode_pair, iterate_batches
from .optim import OptimizerState, adamw_step, zero_grad
from .seeding import rng_for
from .tensor import Tape, Tensor

CLASSIFIER = "classifier.W_cls"
LAYER_MATRICES = ("attention.W_Q", "attention.W_K", "attention.W_V", "attention.W_AO", "ffn.W_in", "ffn.W_out")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_model: int = 64
    d_ffn: int = 256
    n_heads: int = 4
    vocab_size: int = 60
    max_len: int = 24
    n_classes: int = 2
    activation: str = "gelu"
    init_std: float = 0.1
    ln_eps: float = 1e-5

    def __post_init__(self):
        for f in ("n_layers", "d_model", "d_ffn", "n_heads", "vocab_size", "max_len", "n_classes"):
            if getattr(self, f) <= 0:
                raise ValueError(f"{f} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        T.activation(self.activation)

    def to_dict(self) -> dict:
        return asdict(self)


def prunable_names(cfg: ModelConfig) -> list[str]:
    names = [f"layers.{l}.{m}" for l in range(cfg.n_layers) for m in LAYER_MATRICES]
    return names + [CLASSIFIER]


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ffn
    shapes: dict[str, tuple[int, ...]] = {
        "embeddings.token": (cfg.vocab_size, d),
        "embeddings.position": (cfg.max_len, d),
        "embeddings.segment": (2, d),
        "embeddings.ln.gamma": (d,),
        "embeddings.ln.beta": (d,),
    }
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        for m in ("Q", "K", "V", "AO"):
            shapes[p + f"attention.W_{m}"] = (d, d)
            shapes[p + f"attention.b_{m}"] = (d,)
        shapes[p + "attention.ln.gamma"] = (d,)
        shapes[p + "attention.ln.beta"] = (d,)
        shapes[p + "ffn.W_in"] = (d, f)
        shapes[p + "ffn.b_in"] = (f,)
        shapes[p + "ffn.W_out"] = (f, d)
        shapes[p + "ffn.b_out"] = (d,)
        shapes[p + "ffn.ln.gamma"] = (d,)
        shapes[p + "ffn.ln.beta"] = (d,)
    shapes[CLASSIFIER] = (d, cfg.n_classes)
    shapes["classifier.b_cls"] = (cfg.n_classes,)
    return shapes


@dataclass
class ParameterSnapshot:
    """Named parameter copies tagged ``pt``, ``ft`` or ``t`` (with ``step``)."""

    params: dict[str, np.ndarray]
    tag: str = "pt"
    step: int | None = None
    meta: dict[str, str] = field(default_factory=dict)

    def copy(self) -> "ParameterSnapshot":
        return ParameterSnapshot({k: v.copy() for k, v in self.params.items()}, self.tag, self.step, dict(self.meta))

    def equals(self, other: "ParameterSnapshot") -> bool:
        return self.params.keys() == other.params.keys() and all(
            np.array_equal(v, other.params[k]) for k, v in self.params.items())


class Encoder:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = rng_for(seed, "init")
        self.params: dict[str, Tensor] = {}
        for name, shape in _param_shapes(cfg).items():
            if name.endswith(".gamma"):
                arr = np.ones(shape)
            elif len(shape) == 1:
                arr = np.zeros(shape)
            else:
                arr = rng.normal(0.0, cfg.init_std, size=shape)
            self.params[name] = Tensor(arr, requires_grad=True, name=name)
        self.act = T.activation(cfg.activation)

    @property
    def prunable(self) -> list[str]:
        return prunable_names(self.cfg)

    # -- snapshots -------------------------------------------------------

    def snapshot(self, tag: str = "t", step: int | None = None) -> ParameterSnapshot:
        return ParameterSnapshot({k: p.data.copy() for k, p in self.params.items()}, tag, step)

    def restore(self, snap: ParameterSnapshot) -> None:
        if snap.params.keys() != self.params.keys():
            missing = set(self.params) ^ set(snap.params)
            raise ValueError(f"snapshot parameter names differ: {sorted(missing)[:3]}")
        for k, p in self.params.items():
            if snap.params[k].shape != p.shape:
                raise ValueError(f"snapshot shape mismatch for {k}: {snap.params[k].shape} vs {p.shape}")
        for k, p in self.params.items():
            p.data = snap.params[k].astype(p.data.dtype, copy=True)
            p.grad = None

    # -- forward ---------------------------------------------------------

    def _check_masks(self, masks: Mapping | None) -> None:
        if masks:
            allowed = set(self.prunable)
            bad = [k for k in masks if k not in allowed]
            if bad:
                raise ValueError(f"masks given for non-prunable parameters: {bad}")

    def _w(self, name: str, masks: Mapping | None) -> Tensor:
        w = self.params[name]
        if masks is not None and name in masks:
            return w * masks[name]
        return w

    def encode(self, ids: np.ndarray, segments: np.ndarray, attention: np.ndarray,
               masks: Mapping | None = None) -> Tensor:
        """Final hidden states, shape (B, T, d_model)."""
        cfg = self.cfg
        self._check_masks(masks)
        b, t = ids.shape
        if t > cfg.max_len:
            raise ValueError(f"sequence length {t} exceeds max_len {cfg.max_len}")
        p = self.params
        x = T.embedding(p["embeddings.token"], ids)
        x = x + T.embedding(p["embeddings.position"], np.arange(t))
        x = x + T.embedding(p["embeddings.segment"], segments)
        x = T.layer_norm(x, p["embeddings.ln.gamma"], p["embeddings.ln.beta"], cfg.ln_eps)

        h, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
        pad_bias = Tensor(np.where(attention, 0.0, -1e9)[:, None, None, :])
        scale = 1.0 / math.sqrt(dh)
        for l in range(cfg.n_layers):
            pre = f"layers.{l}."
            q = (x @ self._w(pre + "attention.W_Q", masks) + p[pre + "attention.b_Q"]).reshape(b, t, h, dh)
            k = (x @ self._w(pre + "attention.W_K", masks) + p[pre + "attention.b_K"]).reshape(b, t, h, dh)
            v = (x @ self._w(pre + "attention.W_V", masks) + p[pre + "attention.b_V"]).reshape(b, t, h, dh)
            scores = q.transpose(0, 2, 1, 3) @ k.transpose(0, 2, 3, 1)
            attn = T.softmax(scores * scale + pad_bias, axis=-1)
            ctx = (attn @ v.transpose(0, 2, 1, 3)).transpose(0, 2, 1, 3).reshape(b, t, cfg.d_model)
            out = ctx @ self._w(pre + "attention.W_AO", masks) + p[pre + "attention.b_AO"]
            x = T.layer_norm(x + out, p[pre + "attention.ln.gamma"], p[pre + "attention.ln.beta"], cfg.ln_eps)
            ff = self.act(x @ self._w(pre + "ffn.W_in", masks) + p[pre + "ffn.b_in"])
            ff = ff @ self._w(pre + "ffn.W_out", masks) + p[pre + "ffn.b_out"]
            x = T.layer_norm(x + ff, p[pre + "ffn.ln.gamma"], p[pre + "ffn.ln.beta"], cfg.ln_eps)
        return x

    def logits(self, batch: Batch, masks: Mapping | None = None) -> Tensor:
        x = self.encode(batch.ids, batch.segments, batch.attention, masks)
        pooled = x[:, 0, :]
        return pooled @ self._w(CLASSIFIER, masks) + self.params["classifier.b_cls"]

    def forward(self, tokens_a: Sequence[int], tokens_b: Sequence[int], masks: Mapping | None = None) -> Tensor:
        """Logits (K,) for one sentence pair."""
        ids, seg = encode_pair(tokens_a, tokens_b)
        if len(ids) > self.cfg.max_len:
            raise ValueError(f"pair encodes to {len(ids)} tokens > max_len {self.cfg.max_len}")
        ids_arr = np.asarray([ids])
        if ids_arr.min() < 0 or ids_arr.max() >= self.cfg.vocab_size:
            raise ValueError("token id outside the vocabulary")
        batch = Batch(ids_arr, np.asarray([seg]), np.ones_like(ids_arr, dtype=bool), np.zeros(1, np.int64),
                      np.zeros(1, np.int64))
        return self.logits(batch, masks)[0]

    def mlm_logits(self, batch: Batch, positions: np.ndarray, masks: Mapping | None = None) -> Tensor:
        """Vocabulary logits at flattened ``positions`` using the tied token table."""
        x = self.encode(batch.ids, batch.segments, batch.attention, masks)
        b, t, d = x.shape
        rows = T.gather_rows(x.reshape(b * t, d), positions)
        return rows @ self.params["embeddings.token"].transpose(1, 0)

    def predict_proba(self, enc: Encoded, masks: Mapping | None = None, batch_size: int = 256) -> np.ndarray:
        """Class probabilities for every row of ``enc`` (no tape)."""
        out = []
        consts = None if masks is None else {k: np.asarray(getattr(v, "data", v)) for k, v in masks.items()}
        for start in range(0, len(enc), batch_size):
            idx = np.arange(start, min(start + batch_size, len(enc)))
            z = self.logits(enc.batch(idx), consts).data.astype(np.float64)
            z -= z.max(axis=1, keepdims=True)
            e = np.exp(z)
            out.append(e / e.sum(axis=1, keepdims=True))
        return np.concatenate(out) if out else np.zeros((0, self.cfg.n_classes))


def mlm_mask(batch: Batch, rng: np.random.Generator, prob: float,
             vocab_size: int | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pick a random ``prob`` share of ordinary tokens as reconstruction targets.

    Picked tokens become MASK (80%), a random ordinary token (10%) or stay
    unchanged (10%); without ``vocab_size`` every picked token becomes MASK.
    Returns (corrupted ids, flat positions, original token ids).
    """
    ids = batch.ids.copy()
    eligible = ids >= N_SPECIAL
    pick = eligible & (rng.random(ids.shape) < prob)
    if not pick.any():
        rows, cols = np.nonzero(eligible)
        j = int(rng.integers(len(rows)))
        pick[rows[j], cols[j]] = True
    flat = np.flatnonzero(pick)
    targets = ids.reshape(-1)[flat].copy()
    if vocab_size is None:
        ids[pick] = MASK
        return ids, flat, targets
    u = rng.random(flat.size)
    out = ids.reshape(-1)
    out[flat[u < 0.8]] = MASK
    swap = flat[(u >= 0.8) & (u < 0.9)]
    out[swap] = rng.integers(N_SPECIAL, vocab_size, size=swap.size)
    return out.reshape(ids.shape), flat, targets


def pretrain(cfg: ModelConfig, corpus: Encoded, steps: int, seed: int, lr: float = 1e-3,
             batch_size: int = 32, mask_prob: float = 0.15, log: list | None = None) -> ParameterSnapshot:
    """Masked-token reconstruction on bias-free text, returning the tagged ``pt`` snapshot.

    The classifier keeps its seeded initialisation; only the encoder is trained.
    """
    model = Encoder(cfg, seed)
    params = {k: p for k, p in model.params.items() if not k.startswith("classifier.")}
    state = OptimizerState(lr=lr, weight_decay=0.01)
    rng = rng_for(seed, "pretrain")
    batches = iterate_batches(len(corpus), batch_size, rng_for(seed, "pretrain-batches"))
    for step in range(steps):
        batch = corpus.batch(next(batches))
        ids, flat, targets = mlm_mask(batch, rng, mask_prob, cfg.vocab_size)
        masked = Batch(ids, batch.segments, batch.attention, batch.labels, batch.index)
        zero_grad(params)
        with Tape() as tape:
            loss = T.cross_entropy(model.mlm_logits(masked, flat), targets)
        tape.backward(loss)
        adamw_step(params, state)
        if log is not None:
            log.append(loss.item())
    snap = model.snapshot("pt")
    snap.meta.update({"pretrain_steps": str(steps), "seed": str(seed)})
    return snap


def model_from_snapshot(cfg: ModelConfig, snap: ParameterSnapshot) -> Encoder:
    m = Encoder(cfg, 0)
    m.restore(snap)
    return m


def config_to_text(cfg: ModelConfig) -> str:
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in fields(cfg))


def config_from_text(text: str) -> ModelConfig:
    kinds = {f.name: f.type for f in fields(ModelConfig)}
    values = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, val = (s.strip() for s in line.partition("="))
        if key not in kinds:
            raise KeyError(f"unknown model config key {key!r}")
        kind = kinds[key]
        values[key] = int(val) if kind == "int" else float(val) if kind == "float" else val
    return ModelConfig(**values)
