"""Shared transformer encoder.

Input representation = token + segment + position embeddings, layer
normalized, then a stack of post-norm transformer blocks (multi-head
scaled dot-product self-attention with residual + layer norm, then a
GELU feed-forward with residual + layer norm). Row n of the output is
the context-aware state of input position n; both pre-training heads
and the fine-tune recommender consume it.

Broadcasting note: the batched entry point works on (B, T) id arrays;
the single-sequence functions wrap it for a batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .corpus import CLS, PAD
from .errors import ConfigError, DataError

EMBED_NORM_EPS = 1e-12


@dataclass
class EncoderConfig:
    """Architecture settings; desk-scale defaults, paper scale expressible."""

    vocab_size: int
    hidden_size: int = 64
    num_layers: int = 2
    num_heads: int = 2
    feed_forward_size: int = 0  # 0 means 4 * hidden_size
    max_sequence_length: int = 128
    num_segments: int = 2
    dropout_rate: float = 0.1
    init_std: float = 0.02
    positions_per_basket: bool = False

    def __post_init__(self):
        if self.feed_forward_size == 0:
            self.feed_forward_size = 4 * self.hidden_size
        self.validate()

    def validate(self):
        sizes = (self.vocab_size, self.hidden_size, self.num_layers, self.num_heads,
                 self.feed_forward_size, self.max_sequence_length, self.num_segments)
        if any(s <= 0 for s in sizes):
            raise ConfigError(f"all encoder sizes must be positive, got {self}")
        if self.hidden_size % self.num_heads != 0:
            raise ConfigError(
                f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}")
        if self.max_sequence_length < 3:
            raise ConfigError("max_sequence_length must be at least 3 (CLS + item + SEP)")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    def to_header(self):
        """Flatten into checkpoint-manifest header entries."""
        out = {}
        for key, value in self.__dict__.items():
            out[f"config.{key}"] = str(value)
        return out

    @classmethod
    def from_header(cls, header):
        kwargs = {}
        for key, value in header.items():
            if not key.startswith("config."):
                continue
            name = key[len("config."):]
            if name == "positions_per_basket":
                kwargs[name] = value == "True"
            elif name in ("dropout_rate", "init_std"):
                kwargs[name] = float(value)
            else:
                kwargs[name] = int(value)
        return cls(**kwargs)


@dataclass
class InputSequence:
    """Token/segment/position ids plus the attention mask (0 = padding)."""

    token_ids: np.ndarray
    segment_ids: np.ndarray
    position_ids: np.ndarray
    attention_mask: np.ndarray

    def __len__(self):
        return len(self.token_ids)

    def validate(self, config=None):
        arrays = (self.token_ids, self.segment_ids, self.position_ids, self.attention_mask)
        if len({len(a) for a in arrays}) != 1:
            raise DataError("input sequence id lists have unequal lengths")
        if len(self.token_ids) == 0 or self.token_ids[0] != CLS:
            raise DataError("input sequence must start with CLS")
        pad = self.attention_mask == 0
        if np.any(self.token_ids[pad] != PAD) or np.any(self.segment_ids[pad] != 0):
            raise DataError("padding positions must hold PAD tokens with segment 0")
        live = self.position_ids[~pad]
        deltas = np.diff(live)
        per_basket = config.positions_per_basket if config is not None else False
        if per_basket:
            if np.any(deltas < 0):
                raise DataError("position ids must be non-decreasing over non-pad positions")
        elif np.any(deltas <= 0):
            raise DataError("position ids must be strictly increasing over non-pad positions")
        if config is not None and len(self.token_ids) > config.max_sequence_length:
            raise DataError(
                f"sequence length {len(self.token_ids)} exceeds max {config.max_sequence_length}")


def make_input_sequence(spans, span_segments, positions_per_basket=False, align_end_to=None):
    """Assemble an InputSequence from token spans.

    `spans` is a list of token-id lists (e.g. [[CLS], basket_a, [SEP], ...]);
    `span_segments` gives each span's segment id. Default positions number
    tokens serially; with positions_per_basket every token of a span
    shares the span's index as its position id. `align_end_to=N` shifts
    serial positions so the last token sits at N - 1: sequences of
    different lengths then agree on the position ids of their final
    tokens, which keeps a trailing candidate at one fixed, trained id.
    """
    tokens, segments, positions = [], [], []
    for span_index, (span, segment) in enumerate(zip(spans, span_segments)):
        for token in span:
            tokens.append(token)
            segments.append(segment)
            positions.append(span_index if positions_per_basket else len(positions))
    if align_end_to is not None and not positions_per_basket:
        offset = align_end_to - len(tokens)
        if offset < 0:
            raise DataError(f"sequence of {len(tokens)} tokens cannot end at {align_end_to}")
        positions = [p + offset for p in positions]
    return InputSequence(
        token_ids=np.asarray(tokens, dtype=np.int64),
        segment_ids=np.asarray(segments, dtype=np.int64),
        position_ids=np.asarray(positions, dtype=np.int64),
        attention_mask=np.ones(len(tokens), dtype=np.int64),
    )


def pad_batch(sequences):
    """Right-pad to a common length; returns (B, T) int64 arrays."""
    n = len(sequences)
    width = max(len(s) for s in sequences)
    batch = {
        "token_ids": np.full((n, width), PAD, dtype=np.int64),
        "segment_ids": np.zeros((n, width), dtype=np.int64),
        "position_ids": np.zeros((n, width), dtype=np.int64),
        "attention_mask": np.zeros((n, width), dtype=np.int64),
    }
    for i, seq in enumerate(sequences):
        t = len(seq)
        batch["token_ids"][i, :t] = seq.token_ids
        batch["segment_ids"][i, :t] = seq.segment_ids
        batch["position_ids"][i, :t] = seq.position_ids
        batch["attention_mask"][i, :t] = seq.attention_mask
    return batch


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def init_encoder_params(store, config):
    """Create all encoder tensors: embedding tables, block weights, layer norms."""
    d = config.hidden_size
    f = config.feed_forward_size
    std = config.init_std
    store.create("embeddings.token", (config.vocab_size, d), "normal", std)
    store.create("embeddings.segment", (config.num_segments, d), "normal", std)
    store.create("embeddings.position", (config.max_sequence_length, d), "normal", std)
    store.create("embeddings.norm.gain", (d,), "ones")
    store.create("embeddings.norm.bias", (d,), "zeros")
    for i in range(config.num_layers):
        prefix = f"layer{i}."
        for proj in ("query", "key", "value", "output"):
            store.create(prefix + f"attention.{proj}.weight", (d, d), "normal", std)
            store.create(prefix + f"attention.{proj}.bias", (d,), "zeros")
        store.create(prefix + "attention.norm.gain", (d,), "ones")
        store.create(prefix + "attention.norm.bias", (d,), "zeros")
        store.create(prefix + "ffn.inner.weight", (d, f), "normal", std)
        store.create(prefix + "ffn.inner.bias", (f,), "zeros")
        store.create(prefix + "ffn.outer.weight", (f, d), "normal", std)
        store.create(prefix + "ffn.outer.bias", (d,), "zeros")
        store.create(prefix + "ffn.norm.gain", (d,), "ones")
        store.create(prefix + "ffn.norm.bias", (d,), "zeros")


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def build_input_representation_batch(batch, store, train=False, rng=None, dropout_rate=0.0):
    e = ag.gather(store["embeddings.token"], batch["token_ids"], "embeddings.token")
    e = e + ag.gather(store["embeddings.segment"], batch["segment_ids"], "embeddings.segment")
    e = e + ag.gather(store["embeddings.position"], batch["position_ids"], "embeddings.position")
    e = ag.layer_norm(e, store["embeddings.norm.gain"], store["embeddings.norm.bias"],
                      EMBED_NORM_EPS)
    if train and dropout_rate > 0.0:
        e = ag.dropout(e, dropout_rate, rng)
    return e


def transformer_block_batch(h, allowed, store, config, layer_index,
                            train=False, rng=None, probe=None):
    """One post-norm block over (B, T, D) states.

    `allowed` is a boolean attention mask broadcastable to
    (B, heads, T, T); disallowed key positions score -inf pre-softmax.
    """
    b, t, d = h.shape
    heads = config.num_heads
    head_dim = d // heads
    prefix = f"layer{layer_index}."

    def project(name):
        x = ag.matmul(h, store[prefix + f"attention.{name}.weight"])
        x = x + store[prefix + f"attention.{name}.bias"]
        x = ag.reshape(x, (b, t, heads, head_dim))
        return ag.transpose(x, (0, 2, 1, 3))  # (B, A, T, dh)

    q, k, v = project("query"), project("key"), project("value")
    scores = ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(head_dim))
    scores = ag.masked_fill(scores, ~allowed, -np.inf)
    alpha = ag.softmax(scores, axis=-1)
    if probe is not None:
        probe.setdefault("attention", []).append(alpha.data)
    if train and config.dropout_rate > 0.0:
        alpha = ag.dropout(alpha, config.dropout_rate, rng)
    context = ag.matmul(alpha, v)  # (B, A, T, dh)
    context = ag.reshape(ag.transpose(context, (0, 2, 1, 3)), (b, t, d))
    attn_out = ag.matmul(context, store[prefix + "attention.output.weight"])
    attn_out = attn_out + store[prefix + "attention.output.bias"]
    if train and config.dropout_rate > 0.0:
        attn_out = ag.dropout(attn_out, config.dropout_rate, rng)
    h = ag.layer_norm(h + attn_out, store[prefix + "attention.norm.gain"],
                      store[prefix + "attention.norm.bias"], EMBED_NORM_EPS)

    inner = ag.gelu(ag.matmul(h, store[prefix + "ffn.inner.weight"])
                    + store[prefix + "ffn.inner.bias"])
    ffn_out = ag.matmul(inner, store[prefix + "ffn.outer.weight"]) + store[prefix + "ffn.outer.bias"]
    if train and config.dropout_rate > 0.0:
        ffn_out = ag.dropout(ffn_out, config.dropout_rate, rng)
    return ag.layer_norm(h + ffn_out, store[prefix + "ffn.norm.gain"],
                         store[prefix + "ffn.norm.bias"], EMBED_NORM_EPS)


def encode_batch(batch, store, config, train=False, rng=None, extra_attention=None, probe=None):
    """Encode (B, T) id arrays into (B, T, D) context-aware states.

    `extra_attention` optionally restricts attention further: a boolean
    (B, T, T) array where entry [b, q, k] says query q may look at key k.
    """
    key_mask = batch["attention_mask"].astype(bool)[:, None, None, :]  # (B,1,1,T)
    allowed = key_mask if extra_attention is None else (key_mask & extra_attention[:, None, :, :])
    h = build_input_representation_batch(batch, store, train, rng, config.dropout_rate)
    for layer_index in range(config.num_layers):
        h = transformer_block_batch(h, allowed, store, config, layer_index, train, rng, probe)
    return h


# single-sequence wrappers (evaluation semantics: no dropout)

def _as_batch(seq):
    return {
        "token_ids": seq.token_ids[None, :],
        "segment_ids": seq.segment_ids[None, :],
        "position_ids": seq.position_ids[None, :],
        "attention_mask": seq.attention_mask[None, :],
    }


def build_input_representation(seq, store):
    """Summed embeddings + layer norm for one sequence; rows are (T, D)."""
    out = build_input_representation_batch(_as_batch(seq), store)
    return ag.reshape(out, (len(seq), out.shape[-1]))


def transformer_block(h, attention_mask, store, config, layer_index):
    """Apply block `layer_index` to (T, D) states under `attention_mask`."""
    t, d = h.shape
    batched = ag.reshape(h, (1, t, d))
    allowed = np.asarray(attention_mask).astype(bool)[None, None, None, :]
    out = transformer_block_batch(batched, allowed, store, config, layer_index)
    return ag.reshape(out, (t, d))


def encode(seq, store, config, probe=None):
    """Full encoder over one InputSequence; returns (T, D) states."""
    out = encode_batch(_as_batch(seq), store, config, probe=probe)
    return ag.reshape(out, (len(seq), out.shape[-1]))
