"""Long Short-term Transformer over two FIFO memories.

Encoder (tagged ``encoder``, the shared part): an input projection used for
every frame, learned long-memory slot embeddings, ``latent_tokens`` learned
queries that cross-attend to long memory, then a self-attention stack over
the latents.  Decoder (tagged ``decoder``, the per-client part): work-memory
slot embeddings, layers of self-attention over work tokens and
cross-attention into the latents, and a 3-way head read at the newest valid
work slot.

All functions are batched: long slots ``(B, m_l, D)``, work slots
``(B, m_s, D)`` and boolean masks ``(B, m_l)`` / ``(B, m_s)``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import grad as G
from .grad import DECODER, ENCODER, MASK_BIAS, ParamSet, Tensor
from .memory import MemoryState, snapshot

CLASSES = ("lane-keep", "left lane-change", "right lane-change")
LANE_KEEP, LEFT_LC, RIGHT_LC = 0, 1, 2


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 16
    blocks: int = 3
    embed_dim: int = 32
    heads: int = 4
    latent_tokens: int = 8
    encoder_layers: int = 2
    decoder_layers: int = 2
    ff_dim: int = 64
    classes: int = 3
    long_slots: int = 48
    work_slots: int = 12
    ln_eps: float = 1e-5

    def __post_init__(self):
        problems = []
        for name in ("feature_dim", "embed_dim", "heads", "latent_tokens", "ff_dim",
                     "long_slots", "work_slots"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        for name in ("encoder_layers", "decoder_layers"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        if self.heads >= 1 and self.embed_dim % self.heads:
            problems.append(f"embed_dim ({self.embed_dim}) must be divisible by heads ({self.heads})")
        if self.classes != 3:
            problems.append("classes must be 3")
        if self.blocks != 3:
            problems.append("blocks must be 3 (front, rear, cabin)")
        if problems:
            raise ValueError("invalid ModelConfig: " + "; ".join(problems))

    @property
    def input_dim(self) -> int:
        return self.blocks * self.feature_dim

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- parameters

def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple, str]]:
    """Ordered (name, shape, partition) for every parameter."""
    E, F, D = cfg.embed_dim, cfg.ff_dim, cfg.input_dim
    out: list[tuple[str, tuple, str]] = []

    def ln(prefix, tag):
        out.extend([(f"{prefix}.g", (E,), tag), (f"{prefix}.b", (E,), tag)])

    def attn(prefix, tag):
        out.extend((f"{prefix}.{w}", (E, E), tag) for w in ("wq", "wk", "wv", "wo"))

    def ff(prefix, tag):
        out.extend([
            (f"{prefix}.w1", (E, F), tag), (f"{prefix}.b1", (F,), tag),
            (f"{prefix}.w2", (F, E), tag), (f"{prefix}.b2", (E,), tag),
        ])

    out += [
        ("enc.in.w", (D, E), ENCODER),
        ("enc.in.b", (E,), ENCODER),
        ("enc.long_pos", (cfg.long_slots, E), ENCODER),
        ("enc.queries", (cfg.latent_tokens, E), ENCODER),
    ]
    ln("enc.cross.ln_q", ENCODER)
    ln("enc.cross.ln_kv", ENCODER)
    attn("enc.cross.attn", ENCODER)
    ln("enc.cross.ln_ff", ENCODER)
    ff("enc.cross.ff", ENCODER)
    for i in range(cfg.encoder_layers):
        p = f"enc.layer{i}"
        ln(f"{p}.ln1", ENCODER)
        attn(f"{p}.attn", ENCODER)
        ln(f"{p}.ln2", ENCODER)
        ff(f"{p}.ff", ENCODER)
    ln("enc.ln_out", ENCODER)

    out.append(("dec.work_pos", (cfg.work_slots, E), DECODER))
    for i in range(cfg.decoder_layers):
        p = f"dec.layer{i}"
        ln(f"{p}.ln1", DECODER)
        attn(f"{p}.self", DECODER)
        ln(f"{p}.ln2", DECODER)
        attn(f"{p}.cross", DECODER)
        ln(f"{p}.ln3", DECODER)
        ff(f"{p}.ff", DECODER)
    ln("dec.ln_out", DECODER)
    out += [("dec.head.w", (E, cfg.classes), DECODER), ("dec.head.b", (cfg.classes,), DECODER)]
    return out


def init_model(cfg: ModelConfig, seed: int) -> ParamSet:
    """Glorot-uniform matrices, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    tensors, tags = {}, {}
    for name, shape, tag in param_shapes(cfg):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            value = np.ones(shape)
        elif len(shape) == 1:
            value = np.zeros(shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            value = rng.uniform(-limit, limit, size=shape)
        tensors[name] = value
        tags[name] = tag
    return ParamSet(tensors, tags)


def init_decoder(cfg: ModelConfig, seed: int) -> ParamSet:
    return init_model(cfg, seed).subset(DECODER)


# ------------------------------------------------------------------ batches

@dataclass(frozen=True)
class Batch:
    long: np.ndarray
    long_mask: np.ndarray
    work: np.ndarray
    work_mask: np.ndarray
    labels: np.ndarray | None = None

    def __len__(self):
        return self.work.shape[0]

    def take(self, idx) -> Batch:
        return Batch(
            self.long[idx], self.long_mask[idx], self.work[idx], self.work_mask[idx],
            None if self.labels is None else self.labels[idx],
        )

    def with_labels(self, labels) -> Batch:
        return Batch(self.long, self.long_mask, self.work, self.work_mask,
                     np.asarray(labels, dtype=np.int64))


def batch_from_states(states: list[MemoryState], labels=None) -> Batch:
    views = [snapshot(s) for s in states]
    return Batch(
        np.stack([lv.slots for lv, _ in views]),
        np.stack([lv.mask for lv, _ in views]),
        np.stack([wv.slots for _, wv in views]),
        np.stack([wv.mask for _, wv in views]),
        None if labels is None else np.asarray(labels, dtype=np.int64),
    )


# -------------------------------------------------------------------- model

def _ln(p, prefix, x, eps):
    return G.layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"], eps)


def _ff(p, prefix, x):
    h = G.gelu(x @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"])
    return h @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"]


def _attention(p, prefix, q_in: Tensor, kv_in: Tensor, key_mask, heads: int) -> Tensor:
    B, Lq, E = q_in.shape
    Lk = kv_in.shape[1]
    dh = E // heads

    def split(x, L):
        return G.transpose(G.reshape(x, (B, L, heads, dh)), (0, 2, 1, 3))

    q = split(q_in @ p[f"{prefix}.wq"], Lq)
    k = split(kv_in @ p[f"{prefix}.wk"], Lk)
    v = split(kv_in @ p[f"{prefix}.wv"], Lk)
    scores = (q @ G.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    if key_mask is not None:
        scores = scores + np.where(key_mask, 0.0, MASK_BIAS)[:, None, None, :]
    ctx = G.softmax(scores, axis=-1) @ v
    ctx = G.reshape(G.transpose(ctx, (0, 2, 1, 3)), (B, Lq, E))
    return ctx @ p[f"{prefix}.wo"]


def _embed(p, slots: np.ndarray, pos_name: str) -> Tensor:
    return slots @ p["enc.in.w"] + p["enc.in.b"] + p[pos_name]


def _check_width(cfg: ModelConfig, slots: np.ndarray, n_slots: int, what: str):
    if slots.ndim != 3 or slots.shape[1:] != (n_slots, cfg.input_dim):
        raise G.ShapeError(
            f"{what} slots have shape {slots.shape}, expected (B, {n_slots}, {cfg.input_dim})"
        )


def self_attention_stack(p, cfg: ModelConfig, x: Tensor) -> Tensor:
    for i in range(cfg.encoder_layers):
        pre = f"enc.layer{i}"
        h = _ln(p, f"{pre}.ln1", x, cfg.ln_eps)
        x = x + _attention(p, f"{pre}.attn", h, h, None, cfg.heads)
        x = x + _ff(p, f"{pre}.ff", _ln(p, f"{pre}.ln2", x, cfg.ln_eps))
    return _ln(p, "enc.ln_out", x, cfg.ln_eps)


def encode_batch(p, cfg: ModelConfig, long: np.ndarray, long_mask: np.ndarray) -> Tensor:
    """Compress long memory to ``(B, latent_tokens, embed_dim)`` latents.

    Samples with no valid long slot skip the cross-attention block, so their
    latents are the learned queries run through the self-attention stack.
    """
    _check_width(cfg, long, cfg.long_slots, "long")
    B = long.shape[0]
    eps = cfg.ln_eps
    mem = _ln(p, "enc.cross.ln_kv", _embed(p, long, "enc.long_pos"), eps)
    x = G.add(p["enc.queries"], np.zeros((B, cfg.latent_tokens, cfg.embed_dim)))
    gate = long_mask.any(axis=1).astype(np.float64)[:, None, None]
    x = x + _attention(p, "enc.cross.attn", _ln(p, "enc.cross.ln_q", x, eps), mem,
                       long_mask, cfg.heads) * gate
    x = x + _ff(p, "enc.cross.ff", _ln(p, "enc.cross.ln_ff", x, eps)) * gate
    return self_attention_stack(p, cfg, x)


def decode_batch(p, cfg: ModelConfig, latents, work: np.ndarray, work_mask: np.ndarray) -> Tensor:
    """Logits ``(B, 3)`` read at the newest valid work slot."""
    _check_width(cfg, work, cfg.work_slots, "work")
    valid = work_mask.any(axis=1)
    if not valid.all():
        raise ValueError(f"work memory is empty for batch rows {np.flatnonzero(~valid).tolist()}")
    latents = G.as_tensor(latents)
    eps = cfg.ln_eps
    x = _embed(p, work, "dec.work_pos")
    for i in range(cfg.decoder_layers):
        pre = f"dec.layer{i}"
        h = _ln(p, f"{pre}.ln1", x, eps)
        x = x + _attention(p, f"{pre}.self", h, h, work_mask, cfg.heads)
        x = x + _attention(p, f"{pre}.cross", _ln(p, f"{pre}.ln2", x, eps), latents, None,
                           cfg.heads)
        x = x + _ff(p, f"{pre}.ff", _ln(p, f"{pre}.ln3", x, eps))
    x = _ln(p, "dec.ln_out", x, eps)
    # newest slot is index 0 when masks come from snapshot(); argmax finds the first valid one
    newest = np.argmax(work_mask, axis=1)
    pick = np.zeros(work_mask.shape)
    pick[np.arange(len(newest)), newest] = 1.0
    readout = G.sum(x * pick[:, :, None], axis=1)
    return readout @ p["dec.head.w"] + p["dec.head.b"]


def forward_batch(p, cfg: ModelConfig, batch: Batch) -> Tensor:
    latents = encode_batch(p, cfg, batch.long, batch.long_mask)
    return decode_batch(p, cfg, latents, batch.work, batch.work_mask)


# ----------------------------------------------------------- single sample

def encode(phi, cfg: ModelConfig, long_slots: np.ndarray, long_mask: np.ndarray) -> np.ndarray:
    return encode_batch(phi, cfg, long_slots[None], np.asarray(long_mask, bool)[None]).data[0]


def decode(xi_and_phi, cfg: ModelConfig, latents: np.ndarray, work_slots: np.ndarray,
           work_mask: np.ndarray) -> np.ndarray:
    """The decoder reuses the encoder's input projection, so pass both partitions."""
    return decode_batch(xi_and_phi, cfg, latents[None], work_slots[None],
                        np.asarray(work_mask, bool)[None]).data[0]


def forward(params, cfg: ModelConfig, mem: MemoryState) -> np.ndarray:
    long_view, work_view = snapshot(mem)
    latents = encode(params, cfg, long_view.slots, long_view.mask)
    return decode(params, cfg, latents, work_view.slots, work_view.mask)


def argmax_label(logits) -> int:
    """Highest logit; ties go to the lowest class index."""
    return int(np.argmax(np.asarray(logits)))


def predict(params, cfg: ModelConfig, mem: MemoryState) -> int:
    return argmax_label(forward(params, cfg, mem))


def predict_batch(params, cfg: ModelConfig, batch: Batch) -> np.ndarray:
    return np.argmax(forward_batch(params, cfg, batch).data, axis=1)


def loss_and_grads(params: ParamSet, cfg: ModelConfig, batch: Batch, partition: str = G.ALL,
                   latents: np.ndarray | None = None):
    """Mean cross-entropy over ``batch`` and its gradient w.r.t. ``partition``.

    ``latents`` may carry precomputed encoder output when only the decoder
    trains; the encoder is then skipped.
    """
    if len(batch) == 0:
        raise ValueError("loss_and_grads: empty batch")
    if batch.labels is None:
        raise ValueError("loss_and_grads: batch has no labels")
    if latents is not None and partition != DECODER:
        raise ValueError("precomputed latents only valid for decoder-only training")
    leaves = params.leaves(partition)
    if latents is None:
        latents = encode_batch(leaves, cfg, batch.long, batch.long_mask)
    logits = decode_batch(leaves, cfg, latents, batch.work, batch.work_mask)
    loss = G.cross_entropy(logits, batch.labels)
    grads = G.grads_for(leaves, G.backward(loss)) if loss.requires_grad else {}
    return float(loss.data), grads
