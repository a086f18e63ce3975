"""Masked-token transformer encoder over encoded patient histories.

Post-layer-norm architecture: token embeddings (+ optional learned positional
table) -> embedding layer norm -> n_layers of (multi-head self-attention,
position-wise GELU FFN), each sublayer followed by residual + layer norm ->
separate d x |V| decoder projection. PAD positions are excluded from
attention through an additive -1e9 mask, which makes logits at real positions
independent of the PAD tail. Dropping the positional table makes the encoder
permutation-equivariant over event slots, which the ablation relies on.

Training is masked-token prediction: event positions are selected with
probability ``mask_prob`` and replaced by MASK / a random code / kept
(80/10/10; a plain always-MASK mode exists), and the model is fit with AdamW
under global-norm gradient clipping.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .container import ContainerError, load_artifact, save_artifact
from .corpus import ICD_OFFSET, MASK_ID, EncodedSample, PatientHistory, Vocabulary, encode_history
from .optim import AdamW, clip_global_norm
from .tensor import Tape, Tensor, backward

IGNORE_INDEX = -100
_NEG_INF = -1e9

MASK_MODES = ("bert", "plain")


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss); message carries epoch/batch."""


@dataclass
class ModelConfig:
    """Encoder hyperparameters. Defaults are the full-scale reference setup;
    :meth:`desk_scale` returns the small configuration used for CPU-sized
    experiments."""

    vocab_size: int
    d: int = 256
    n_layers: int = 4
    n_heads: int = 4
    ffn_dim: int = 0  # 0 -> 4*d
    max_len: int = 131  # 3 demographic slots + H event slots
    use_positional: bool = True
    dropout: float = 0.1
    mask_prob: float = 0.25
    mask_mode: str = "bert"
    lr: float = 5e-5
    batch_size: int = 256
    epochs: int = 30
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.ffn_dim == 0:
            self.ffn_dim = 4 * self.d
        if self.d % self.n_heads != 0:
            raise ValueError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if not (0.0 < self.mask_prob < 1.0) and self.mask_prob != 1.0:
            # mask_prob=1.0 allowed only for the plain-mode degenerate case
            raise ValueError(f"mask_prob must be in (0, 1], got {self.mask_prob}")
        if self.max_len < 4:
            raise ValueError(f"max_len must be >= 4, got {self.max_len}")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}")
        if self.vocab_size < 8:
            raise ValueError(f"vocab_size {self.vocab_size} leaves no room for the reserved tokens")

    @property
    def H(self) -> int:
        return self.max_len - 3

    @property
    def d_head(self) -> int:
        return self.d // self.n_heads

    @classmethod
    def desk_scale(cls, vocab_size: int, **overrides) -> "ModelConfig":
        base = dict(d=64, n_layers=2, n_heads=2, max_len=3 + 48, lr=1e-3,
                    batch_size=64, epochs=10)
        base.update(overrides)
        return cls(vocab_size=vocab_size, **base)


@dataclass
class MaskedBatch:
    input_ids: np.ndarray  # (B, L) after masking
    labels: np.ndarray  # (B, L), IGNORE_INDEX where not selected
    attention_mask: np.ndarray  # (B, L)


def _stack_samples(samples: Sequence[EncodedSample], trim: bool = True) -> tuple[np.ndarray, np.ndarray]:
    ids = np.stack([s.token_ids for s in samples])
    mask = np.stack([s.attention_mask for s in samples])
    if trim:
        longest = int(max(s.length for s in samples))
        ids = ids[:, :longest]
        mask = mask[:, :longest]
    return ids, mask


def mlm_mask(
    samples: Sequence[EncodedSample],
    mask_prob: float,
    rng: np.random.Generator,
    vocab_size: int,
    mode: str = "bert",
    trim: bool = True,
) -> MaskedBatch:
    """Select event positions with probability mask_prob and hide them.

    Only event slots (position >= 3, non-PAD) are candidates; CLS and the
    demographic slots are never touched. In "bert" mode selected positions
    become MASK 80% of the time, a uniformly random diagnosis id 10%, and
    stay unchanged 10%; "plain" mode always writes MASK. Labels carry the
    original ids at selected positions and IGNORE_INDEX elsewhere.
    """
    if mode not in MASK_MODES:
        raise ValueError(f"mask mode must be one of {MASK_MODES}")
    if mode == "bert" and vocab_size <= ICD_OFFSET:
        raise ValueError(
            f"bert masking draws random diagnosis ids, needs vocab_size > {ICD_OFFSET}, got {vocab_size}"
        )
    ids, attn = _stack_samples(samples, trim=trim)
    B, L = ids.shape
    positions = np.arange(L)
    eligible = (attn == 1) & (positions >= 3)
    selected = eligible & (rng.random((B, L)) < mask_prob)
    labels = np.where(selected, ids, IGNORE_INDEX)
    out = ids.copy()
    if mode == "plain":
        out[selected] = MASK_ID
    else:
        r = rng.random((B, L))
        rand_ids = rng.integers(ICD_OFFSET, vocab_size, size=(B, L))
        out[selected & (r < 0.8)] = MASK_ID
        swap = selected & (r >= 0.8) & (r < 0.9)
        out[swap] = rand_ids[swap]
        # remaining 10%: keep the original id
    return MaskedBatch(out, labels, attn)


class EncoderModel:
    """Parameter store plus forward pass; immutable once training finishes."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor],
                 vocab_sha256: str = "", epochs_completed: int = 0):
        self.config = config
        self.params = params
        self.vocab_sha256 = vocab_sha256
        self.epochs_completed = epochs_completed
        self.loss_history: list[float] = []

    # -- construction ------------------------------------------------------

    @classmethod
    def build(cls, config: ModelConfig, vocab_sha256: str = "") -> "EncoderModel":
        rng = np.random.default_rng(config.seed)
        d, V, L = config.d, config.vocab_size, config.max_len
        f = config.ffn_dim

        def normal(*shape):
            return (rng.standard_normal(shape) * 0.02).astype(np.float32)

        p: dict[str, Tensor] = {}

        def par(name, arr):
            p[name] = T.parameter(arr, name=name)

        par("tok_emb", normal(V, d))
        if config.use_positional:
            par("pos_emb", normal(L, d))
        par("emb_ln_g", np.ones(d, dtype=np.float32))
        par("emb_ln_b", np.zeros(d, dtype=np.float32))
        for i in range(config.n_layers):
            for proj in ("q", "k", "v", "o"):
                par(f"l{i}.attn_w{proj}", normal(d, d))
                par(f"l{i}.attn_b{proj}", np.zeros(d, dtype=np.float32))
            par(f"l{i}.ln1_g", np.ones(d, dtype=np.float32))
            par(f"l{i}.ln1_b", np.zeros(d, dtype=np.float32))
            par(f"l{i}.ffn_w1", normal(d, f))
            par(f"l{i}.ffn_b1", np.zeros(f, dtype=np.float32))
            par(f"l{i}.ffn_w2", normal(f, d))
            par(f"l{i}.ffn_b2", np.zeros(d, dtype=np.float32))
            par(f"l{i}.ln2_g", np.ones(d, dtype=np.float32))
            par(f"l{i}.ln2_b", np.zeros(d, dtype=np.float32))
        par("dec_w", normal(d, V))
        par("dec_b", np.zeros(V, dtype=np.float32))
        return cls(config, p, vocab_sha256=vocab_sha256)

    def params_sha256(self) -> str:
        """Content hash of the parameters; identifies the model independent
        of any file it may have been saved to."""
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode("utf-8"))
            h.update(np.ascontiguousarray(self.params[k].data, dtype="<f4").tobytes())
        return h.hexdigest()

    def astype(self, dtype) -> "EncoderModel":
        """Copy with parameters cast (float64 for gradient checking)."""
        params = {k: T.parameter(t.data.astype(dtype), name=k) for k, t in self.params.items()}
        m = EncoderModel(self.config, params, self.vocab_sha256, self.epochs_completed)
        m.loss_history = list(self.loss_history)
        return m

    # -- forward -----------------------------------------------------------

    def forward(
        self,
        input_ids: np.ndarray,
        attention_mask: np.ndarray,
        train: bool = False,
        rng: np.random.Generator | None = None,
    ) -> tuple[Tensor, Tensor]:
        """Contextual vectors (B,L,d) and decoder logits (B,L,|V|).

        PAD keys/values receive -1e9 before the attention softmax, so their
        weight underflows to exactly zero and trailing PAD never changes the
        outputs at real positions.
        """
        cfg = self.config
        p = self.params
        B, L = input_ids.shape
        if L > cfg.max_len:
            raise ValueError(f"sequence length {L} exceeds max_len {cfg.max_len}")
        drop = cfg.dropout if train else 0.0

        h = T.embedding_lookup(p["tok_emb"], input_ids)
        if cfg.use_positional:
            pos = T.embedding_lookup(p["pos_emb"], np.arange(L))
            h = T.add(h, pos)
        h = T.layer_norm(h, p["emb_ln_g"], p["emb_ln_b"])
        h = T.dropout(h, drop, train, rng)

        dtype = p["tok_emb"].dtype
        neg = ((1 - attention_mask) * _NEG_INF).astype(dtype).reshape(B, 1, 1, L)
        attn_bias = T.constant(neg)
        inv_sqrt_dh = 1.0 / np.sqrt(cfg.d_head)

        for i in range(cfg.n_layers):
            def heads(name):
                x = T.add(T.matmul(h, p[f"l{i}.attn_w{name}"]), p[f"l{i}.attn_b{name}"])
                x = T.reshape(x, (B, L, cfg.n_heads, cfg.d_head))
                return T.transpose(x, (0, 2, 1, 3))  # (B, heads, L, d_head)

            q, k, v = heads("q"), heads("k"), heads("v")
            scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), inv_sqrt_dh)
            scores = T.add(scores, attn_bias)
            probs = T.softmax(scores, axis=-1)
            probs = T.dropout(probs, drop, train, rng)
            ctx = T.matmul(probs, v)
            ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, L, cfg.d))
            attn_out = T.add(T.matmul(ctx, p[f"l{i}.attn_wo"]), p[f"l{i}.attn_bo"])
            attn_out = T.dropout(attn_out, drop, train, rng)
            h = T.layer_norm(T.add(h, attn_out), p[f"l{i}.ln1_g"], p[f"l{i}.ln1_b"])

            inner = T.gelu(T.add(T.matmul(h, p[f"l{i}.ffn_w1"]), p[f"l{i}.ffn_b1"]))
            ffn_out = T.add(T.matmul(inner, p[f"l{i}.ffn_w2"]), p[f"l{i}.ffn_b2"])
            ffn_out = T.dropout(ffn_out, drop, train, rng)
            h = T.layer_norm(T.add(h, ffn_out), p[f"l{i}.ln2_g"], p[f"l{i}.ln2_b"])

        logits = T.add(T.matmul(h, p["dec_w"]), p["dec_b"])
        return h, logits

    def mlm_loss(self, batch: MaskedBatch, train: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
        _, logits = self.forward(batch.input_ids, batch.attention_mask, train=train, rng=rng)
        return T.cross_entropy(logits, batch.labels, ignore_index=IGNORE_INDEX)


def train(
    model: EncoderModel,
    samples: Sequence[EncodedSample],
    rng: np.random.Generator | None = None,
    epochs: int | None = None,
    callbacks: Sequence[Callable[[int, float, EncoderModel], None]] = (),
    checkpoint_dir: str | Path | None = None,
    log: Callable[[str], None] | None = None,
) -> list[float]:
    """Fit the model on encoded samples; returns per-epoch mean MLM loss.

    Deterministic for a fixed config seed (single worker): batch order,
    masking and dropout all draw from one generator seeded by the config.
    The epoch mean weights batches by their masked-position counts. A
    non-finite loss aborts with the epoch/batch location.
    """
    if not samples:
        raise ValueError("training corpus is empty")
    cfg = model.config
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    epochs = cfg.epochs if epochs is None else epochs
    opt = AdamW(model.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    names = list(model.params)
    history: list[float] = []
    n = len(samples)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n)
        total_loss = 0.0
        total_masked = 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            chunk = [samples[j] for j in order[start : start + cfg.batch_size]]
            batch = mlm_mask(chunk, cfg.mask_prob, rng, cfg.vocab_size, mode=cfg.mask_mode)
            n_masked = int((batch.labels != IGNORE_INDEX).sum())
            if n_masked == 0:
                continue
            try:
                with Tape() as tape:
                    loss = model.mlm_loss(batch, train=True, rng=rng)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise T.TensorError("loss is non-finite")
                grads = backward(loss, tape, params=model.params.values())
            except T.TensorError as exc:
                raise TrainingError(f"epoch {epoch} batch {b}: {exc}") from exc
            named = {k: grads[model.params[k]] for k in names}
            clip_global_norm(named, cfg.clip_norm)
            opt.step(named)
            total_loss += value * n_masked
            total_masked += n_masked
        mean = total_loss / max(total_masked, 1)
        history.append(mean)
        model.epochs_completed += 1
        model.loss_history.append(mean)
        if log:
            log(f"epoch {epoch}/{epochs}: mlm loss {mean:.4f}")
        if checkpoint_dir is not None:
            save_checkpoint(model, Path(checkpoint_dir) / f"epoch{epoch:03d}.ckpt")
        for cb in callbacks:
            cb(epoch, mean, model)
    return history


# ---------------------------------------------------------------------------
# Next-code inference
# ---------------------------------------------------------------------------


def _prefix_ids(prefix: PatientHistory, vocab: Vocabulary, cfg: ModelConfig,
                use_gender_age: bool) -> np.ndarray:
    """[CLS][GENDER][AGE][e1..ek][MASK] ids for a history prefix, unpadded."""
    keep = cfg.H - 1
    events = prefix.events[-keep:] if len(prefix.events) > keep else prefix.events
    trimmed = PatientHistory(prefix.patient_id, prefix.gender, prefix.age_years, list(events))
    enc = encode_history(trimmed, vocab, H=cfg.H, use_gender_age=use_gender_age)
    ids = enc.token_ids[: enc.length].tolist() + [MASK_ID]
    return np.asarray(ids, dtype=np.int64)


def predict_next_distribution_batch(
    model: EncoderModel,
    prefixes: Sequence[PatientHistory],
    vocab: Vocabulary,
    use_gender_age: bool = True,
) -> np.ndarray:
    """Next-code distributions for many prefixes at once; rows sum to 1.

    The distribution is the MASK-slot softmax with all non-diagnosis token
    mass zeroed and renormalized over the diagnosis ids.
    """
    if len(vocab) != model.config.vocab_size:
        raise ValueError(
            f"vocabulary size {len(vocab)} does not match model vocab_size {model.config.vocab_size}"
        )
    rows = [_prefix_ids(p, vocab, model.config, use_gender_age) for p in prefixes]
    L = max(len(r) for r in rows)
    B = len(rows)
    ids = np.zeros((B, L), dtype=np.int64)
    attn = np.zeros((B, L), dtype=np.int64)
    mask_pos = np.empty(B, dtype=np.int64)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
        attn[i, : len(r)] = 1
        mask_pos[i] = len(r) - 1
    _, logits = model.forward(ids, attn, train=False)
    at_mask = logits.data[np.arange(B), mask_pos]  # (B, V)
    shifted = at_mask - at_mask.max(axis=-1, keepdims=True)
    probs = np.exp(shifted)
    probs[:, :ICD_OFFSET] = 0.0
    probs /= probs.sum(axis=-1, keepdims=True)
    return probs


def predict_next_distribution(
    model: EncoderModel,
    prefix: PatientHistory,
    vocab: Vocabulary,
    use_gender_age: bool = True,
) -> np.ndarray:
    """Distribution over the vocabulary for the code following ``prefix``."""
    return predict_next_distribution_batch(model, [prefix], vocab, use_gender_age)[0]


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def save_checkpoint(model: EncoderModel, path: str | Path) -> None:
    meta = {
        "config": asdict(model.config),
        "vocab_sha256": model.vocab_sha256,
        "seed": model.config.seed,
        "epochs_completed": model.epochs_completed,
        "loss_history": model.loss_history,
    }
    arrays = {k: t.data for k, t in model.params.items()}
    save_artifact(path, kind="encoder", meta=meta, arrays=arrays)


def load_checkpoint(path: str | Path, expected_vocab_sha256: str | None = None) -> EncoderModel:
    """Load a checkpoint; refuses a vocabulary-hash mismatch when a hash is given."""
    meta, arrays = load_artifact(path, kind="encoder")
    if expected_vocab_sha256 is not None and meta.get("vocab_sha256") != expected_vocab_sha256:
        raise ContainerError(
            "checkpoint was trained with a different vocabulary "
            f"(hash {meta.get('vocab_sha256', '?')[:12]}..., expected {expected_vocab_sha256[:12]}...)"
        )
    config = ModelConfig(**meta["config"])
    template = EncoderModel.build(config)
    if set(arrays) != set(template.params):
        missing = set(template.params) - set(arrays)
        extra = set(arrays) - set(template.params)
        raise ContainerError(f"checkpoint parameters do not match config (missing {sorted(missing)}, extra {sorted(extra)})")
    for k, t in template.params.items():
        if arrays[k].shape != t.data.shape:
            raise ContainerError(f"parameter {k!r} has shape {arrays[k].shape}, expected {t.data.shape}")
    params = {k: T.parameter(arrays[k], name=k) for k in template.params}
    model = EncoderModel(config, params, vocab_sha256=meta.get("vocab_sha256", ""),
                         epochs_completed=int(meta.get("epochs_completed", 0)))
    model.loss_history = list(meta.get("loss_history", []))
    return model
