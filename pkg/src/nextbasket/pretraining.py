"""Offline stage: masked-item and next-basket-order objectives.

Examples are packed basket pairs ([CLS] A [SEP] B [SEP]) where B either
immediately follows A in one user's train sequence (label true, drawn
with probability 0.5) or is deliberately "apart": a non-adjacent basket
of the same user, or a different user's basket when none exists.
Random item positions are masked and the model is trained to recover
them (mean NLL over the catalog) while the CLS state classifies the
pair order (binary NLL); the step loss is the sum of both.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import ParameterStore, Tape, backward
from .corpus import CLS, MASK, N_SPECIALS, SEP
from .encoder import encode_batch, init_encoder_params, make_input_sequence, pad_batch
from .errors import ContractError, SamplingError
from .optim import AdamState, adam_step

logger = logging.getLogger(__name__)

MASKED_ITEM_BIAS = "heads.masked_item.bias"
NEXT_BASKET_WEIGHT = "heads.next_basket.weight"
NEXT_BASKET_BIAS = "heads.next_basket.bias"

PROB_CLAMP = 1e-12


@dataclass
class PretrainExample:
    input: object            # InputSequence
    mask_positions: np.ndarray
    mask_targets: np.ndarray  # original vocabulary ids
    is_next: bool


@dataclass
class PretrainLosses:
    masked_item: float
    next_basket: float

    @property
    def total(self):
        return self.masked_item + self.next_basket


def init_pretrain_heads(store, config, n_items):
    store.create(MASKED_ITEM_BIAS, (n_items,), "zeros")
    store.create(NEXT_BASKET_WEIGHT, (config.hidden_size, 1), "normal", config.init_std)
    store.create(NEXT_BASKET_BIAS, (1,), "zeros")


# ---------------------------------------------------------------------------
# example construction
# ---------------------------------------------------------------------------

def sample_basket_pair(corpus, rng, negative_mode="same_user"):
    """Draw (basket_a, basket_b, is_next) from the train split.

    A is uniform over (user, position) pairs that have a following train
    basket. With probability 0.5, B is that next basket (is_next=True);
    otherwise B is a non-adjacent basket: same user at distance >= 2, or
    a different user's train basket when the user has none (or when
    negative_mode='cross_user').
    """
    if corpus.split is None:
        raise SamplingError("corpus has no split; run split_corpus first")
    eligible = [(u, t)
                for u, entry in corpus.split.items()
                for t in range(len(entry.train) - 1)]
    if not eligible:
        raise SamplingError("no user has two consecutive train baskets")

    user, t = eligible[int(rng.integers(len(eligible)))]
    train = corpus.split[user].train
    basket_a = train[t]
    if rng.random() < 0.5:
        return basket_a, train[t + 1], True

    candidates = [j for j in range(len(train)) if abs(j - t) >= 2]
    if negative_mode == "same_user" and candidates:
        j = candidates[int(rng.integers(len(candidates)))]
        return basket_a, train[j], False
    # cross-user draw
    others = [u for u in corpus.split if u != user and corpus.split[u].train]
    if not others:
        raise SamplingError("cannot draw a negative pair: single user with adjacent-only baskets")
    other = others[int(rng.integers(len(others)))]
    other_train = corpus.split[other].train
    return basket_a, other_train[int(rng.integers(len(other_train)))], False


def pack_basket_pair(items_a, items_b, max_len, positions_per_basket=False):
    """[CLS] A [SEP] B [SEP] with segments 0/1; over-long pairs shed the longer tail."""
    a = list(items_a)
    b = list(items_b)
    budget = max_len - 3
    if budget < 2:
        raise ContractError(f"max_len {max_len} cannot hold a basket pair")
    while len(a) + len(b) > budget:
        target = a if len(a) > len(b) else b
        if len(target) <= 1:
            target = b if target is a else a
        target.pop()
    return make_input_sequence(
        spans=[[CLS], a, [SEP], b, [SEP]],
        span_segments=[0, 0, 0, 1, 1],
        positions_per_basket=positions_per_basket,
    )


def apply_masking(seq, mask_rate, rng, vocab, mask_token_prob=0.8, random_token_prob=0.1,
                  is_next=False):
    """Mask real-item positions of `seq` and return the PretrainExample.

    Each real-item position is selected independently with probability
    `mask_rate`; the whole draw is retried until at least one position is
    selected. A selected token becomes MASK with `mask_token_prob`, a
    random real item with `random_token_prob`, and stays itself otherwise.
    """
    real = np.flatnonzero((seq.token_ids >= N_SPECIALS) & (seq.attention_mask == 1))
    if real.size == 0:
        raise ContractError("sequence has no real-item position to mask")
    picked = rng.random(real.size) < mask_rate
    while not picked.any():
        picked = rng.random(real.size) < mask_rate
    positions = real[picked]

    tokens = seq.token_ids.copy()
    targets = tokens[positions].copy()
    for pos in positions:
        roll = rng.random()
        if roll < mask_token_prob:
            tokens[pos] = MASK
        elif roll < mask_token_prob + random_token_prob:
            tokens[pos] = N_SPECIALS + int(rng.integers(vocab.n_items))
        # else: keep the original token
    masked = type(seq)(
        token_ids=tokens,
        segment_ids=seq.segment_ids.copy(),
        position_ids=seq.position_ids.copy(),
        attention_mask=seq.attention_mask.copy(),
    )
    return PretrainExample(input=masked, mask_positions=positions, mask_targets=targets,
                           is_next=is_next)


def build_pretrain_example(corpus, rng, config, mask_rate=0.15, mask_token_prob=0.8,
                           random_token_prob=0.1, negative_mode="same_user"):
    basket_a, basket_b, is_next = sample_basket_pair(corpus, rng, negative_mode)
    seq = pack_basket_pair(basket_a.items, basket_b.items, config.max_sequence_length,
                           config.positions_per_basket)
    return apply_masking(seq, mask_rate, rng, corpus.vocabulary, mask_token_prob,
                         random_token_prob, is_next=is_next)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _real_item_logits(rows, store):
    """Project hidden rows onto the catalog via the tied token-embedding table."""
    token_table = store["embeddings.token"]
    n_items = token_table.shape[0] - N_SPECIALS
    real_embeddings = ag.slice_axis(token_table, 0, N_SPECIALS, N_SPECIALS + n_items)
    return ag.matmul(rows, ag.transpose(real_embeddings)) + store[MASKED_ITEM_BIAS]


def _check_targets(targets, store):
    vocab_size = store["embeddings.token"].shape[0]
    bad = (targets < N_SPECIALS) | (targets >= vocab_size)
    if bad.any():
        raise ContractError(f"mask target {int(targets[bad][0])} is not a real item index")


def masked_item_loss(hidden, example, store):
    """Mean NLL of the original items at the masked positions of one example."""
    _check_targets(example.mask_targets, store)
    rows = ag.gather(hidden, example.mask_positions, "hidden")
    logp = ag.log_softmax(_real_item_logits(rows, store), axis=-1)
    picked = ag.pick_per_row(logp, example.mask_targets - N_SPECIALS)
    return ag.neg(ag.mean(picked))


def _binary_nll(logits, labels):
    """Elementwise -log p(label) for sigmoid logits; p clamped away from 0/1."""
    p = ag.clip(ag.sigmoid(logits), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = ag.constant(labels)
    one_minus_y = ag.constant(1.0 - labels)
    return ag.neg(ag.mul(y, ag.log(p)) + ag.mul(one_minus_y, ag.log(ag.shift(ag.neg(p), 1.0))))


def next_basket_loss(hidden, is_next, store):
    """Binary NLL of the pair-order label from the CLS state of one example."""
    cls_state = ag.slice_axis(hidden, 0, 0, 1)  # (1, D)
    logit = ag.matmul(cls_state, store[NEXT_BASKET_WEIGHT]) + store[NEXT_BASKET_BIAS]
    nll = _binary_nll(logit, np.full((1, 1), 1.0 if is_next else 0.0))
    return ag.reshape(nll, ())


def masked_batch_l1(examples, store, config, train=False, rng=None, extra_attention=None):
    """Masked-item loss alone over a batch (no pair-order head required)."""
    batch = pad_batch([e.input for e in examples])
    n = len(examples)
    width = batch["token_ids"].shape[1]
    hidden = encode_batch(batch, store, config, train=train, rng=rng,
                          extra_attention=extra_attention)
    flat_positions = np.concatenate(
        [example.mask_positions + i * width for i, example in enumerate(examples)])
    targets = np.concatenate([e.mask_targets for e in examples])
    _check_targets(targets, store)
    weights = np.concatenate(
        [np.full(len(e.mask_positions), 1.0 / (len(e.mask_positions) * n)) for e in examples])
    flat_hidden = ag.reshape(hidden, (n * width, config.hidden_size))
    rows = ag.gather(flat_hidden, flat_positions, "hidden")
    logp = ag.log_softmax(_real_item_logits(rows, store), axis=-1)
    nll = ag.neg(ag.pick_per_row(logp, targets - N_SPECIALS))
    return ag.sum_(ag.mul(nll, ag.constant(weights))), nll.data


def batch_losses(examples, store, config, train=False, rng=None, mip_same_basket_only=False):
    """Masked-item and pair-order losses over a batch.

    Returns (l1, l2, per_example_l1, per_example_l2) where l1/l2 are the
    batch means as scalar tensors. With `mip_same_basket_only` the
    masked-item pass runs under an attention mask confined to each
    token's own segment (the pair-order pass always sees everything).
    """
    batch = pad_batch([e.input for e in examples])
    n = len(examples)
    width = batch["token_ids"].shape[1]

    hidden_full = encode_batch(batch, store, config, train=train, rng=rng)
    if mip_same_basket_only:
        segments = batch["segment_ids"]
        same_segment = segments[:, :, None] == segments[:, None, :]
        hidden_mip = encode_batch(batch, store, config, train=train, rng=rng,
                                  extra_attention=same_segment)
    else:
        hidden_mip = hidden_full

    # masked-item loss: flattened gather over (B*T, D)
    flat_positions = np.concatenate(
        [example.mask_positions + i * width for i, example in enumerate(examples)])
    targets = np.concatenate([e.mask_targets for e in examples])
    _check_targets(targets, store)
    weights = np.concatenate(
        [np.full(len(e.mask_positions), 1.0 / (len(e.mask_positions) * n)) for e in examples])

    flat_hidden = ag.reshape(hidden_mip, (n * width, config.hidden_size))
    rows = ag.gather(flat_hidden, flat_positions, "hidden")
    logp = ag.log_softmax(_real_item_logits(rows, store), axis=-1)
    nll = ag.neg(ag.pick_per_row(logp, targets - N_SPECIALS))
    l1 = ag.sum_(ag.mul(nll, ag.constant(weights)))

    bounds = np.cumsum([len(e.mask_positions) for e in examples])[:-1]
    per_example_l1 = np.array([seg.mean() for seg in np.split(nll.data, bounds)])

    # pair-order loss from the CLS column
    cls_states = ag.reshape(ag.slice_axis(hidden_full, 1, 0, 1), (n, config.hidden_size))
    logits = ag.matmul(cls_states, store[NEXT_BASKET_WEIGHT]) + store[NEXT_BASKET_BIAS]
    labels = np.array([[1.0 if e.is_next else 0.0] for e in examples])
    nll2 = _binary_nll(logits, labels)
    l2 = ag.mean(nll2)
    per_example_l2 = nll2.data.reshape(-1).copy()

    return l1, l2, per_example_l1, per_example_l2


def pretrain_step(examples, store, adam, config, train_rng=None, mip_same_basket_only=False):
    """One optimization step; returns the pre-update losses."""
    if not examples:
        raise ContractError("pretrain_step needs a non-empty batch")
    with Tape() as tape:
        l1, l2, per_l1, per_l2 = batch_losses(examples, store, config, train=True,
                                              rng=train_rng,
                                              mip_same_basket_only=mip_same_basket_only)
        l3 = l1 + l2
    if not np.isfinite(l3.data):
        per_total = per_l1 + per_l2
        bad = int(np.argmax(~np.isfinite(per_total)))
        raise ContractError(f"non-finite pre-training loss at example index {bad}")
    losses = PretrainLosses(masked_item=l1.item(), next_basket=l2.item())
    backward(tape, l3, store)
    adam_step(store, adam)
    return losses


# ---------------------------------------------------------------------------
# training driver and held-out evaluation
# ---------------------------------------------------------------------------

@dataclass
class PretrainSettings:
    batch_size: int = 32
    steps: int = 40000
    mask_rate: float = 0.15
    mask_token_prob: float = 0.8
    random_token_prob: float = 0.1
    negative_mode: str = "same_user"
    learning_rate: float = 2e-5
    seed: int = 0
    mip_same_basket_only: bool = False


def training_rng(seed, stream=1):
    """Deterministic rng for sampling/masking/dropout, separate from init."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed,
                                                                      spawn_key=(stream,))))


def run_pretraining(corpus, config, settings, resume=None, step_callback=None):
    """Train from scratch (or resume) and return (store, adam, rng, history).

    `resume` is an optional (params, adam, rng, next_step) tuple; the rng
    restores the exact sampling stream so a resumed run continues the
    uninterrupted one. `step_callback(step, losses, store, adam, rng)`
    fires after every step (loss logging, periodic checkpoints).
    """
    n_items = corpus.vocabulary.n_items
    if resume is None:
        store = ParameterStore(settings.seed)
        init_encoder_params(store, config)
        init_pretrain_heads(store, config, n_items)
        adam = AdamState(learning_rate=settings.learning_rate)
        rng = training_rng(settings.seed)
        first_step = 1
    else:
        params, adam, rng, first_step = resume
        store = ParameterStore(settings.seed)
        for name, array in params.items():
            store.add(name, array)
        if adam is None:
            adam = AdamState(learning_rate=settings.learning_rate)

    history = []
    for step in range(first_step, settings.steps + 1):
        examples = [
            build_pretrain_example(corpus, rng, config, settings.mask_rate,
                                   settings.mask_token_prob, settings.random_token_prob,
                                   settings.negative_mode)
            for _ in range(settings.batch_size)
        ]
        losses = pretrain_step(examples, store, adam, config,
                               train_rng=rng,
                               mip_same_basket_only=settings.mip_same_basket_only)
        history.append(losses)
        if step_callback is not None:
            step_callback(step, losses, store, adam, rng)
    return store, adam, rng, history


def build_heldout_examples(corpus, config, rng, mask_rate=0.15):
    """Evaluation pairs from the held-out region: (validation, test) positives
    and (validation, other user's test) negatives, masked with `rng`."""
    examples = []
    users = sorted(corpus.split)
    for user in users:
        entry = corpus.split[user]
        seq = pack_basket_pair(entry.validation.items, entry.test.items,
                               config.max_sequence_length, config.positions_per_basket)
        examples.append(apply_masking(seq, mask_rate, rng, corpus.vocabulary, is_next=True))
        if len(users) > 1:
            other = users[int(rng.integers(len(users) - 1))]
            if other >= user:
                other += 1
            far = corpus.split[other].test
            seq = pack_basket_pair(entry.validation.items, far.items,
                                   config.max_sequence_length, config.positions_per_basket)
            examples.append(apply_masking(seq, mask_rate, rng, corpus.vocabulary, is_next=False))
    return examples


def masked_item_accuracy(examples, store, config, batch_size=64):
    """Top-1 accuracy of the masked-item head over `examples`."""
    hits = 0
    total = 0
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        batch = pad_batch([e.input for e in chunk])
        width = batch["token_ids"].shape[1]
        hidden = encode_batch(batch, store, config)
        flat = ag.reshape(hidden, (len(chunk) * width, config.hidden_size))
        positions = np.concatenate([e.mask_positions + i * width for i, e in enumerate(chunk)])
        targets = np.concatenate([e.mask_targets for e in chunk])
        rows = ag.gather(flat, positions, "hidden")
        logits = _real_item_logits(rows, store)
        predictions = logits.data.argmax(axis=-1) + N_SPECIALS
        hits += int((predictions == targets).sum())
        total += len(targets)
    return hits / total


def next_basket_accuracy(examples, store, config, batch_size=64):
    """Pair-order classification accuracy (threshold 0.5) over `examples`."""
    hits = 0
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        batch = pad_batch([e.input for e in chunk])
        hidden = encode_batch(batch, store, config)
        cls_states = ag.reshape(ag.slice_axis(hidden, 1, 0, 1), (len(chunk), config.hidden_size))
        logits = ag.matmul(cls_states, store[NEXT_BASKET_WEIGHT]) + store[NEXT_BASKET_BIAS]
        predicted = logits.data.reshape(-1) > 0.0
        actual = np.array([e.is_next for e in chunk])
        hits += int((predicted == actual).sum())
    return hits / len(examples)
