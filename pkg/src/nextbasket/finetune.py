"""Online stage: candidate-conditioned scoring of the whole catalog.

Each (history, candidate) pair is packed as [CLS] history [SEP]
candidate [SEP] and encoded; the candidate's hidden state gates an
attention pool over the history states, the pooled vector is combined
with the user embedding, and the dot product gives the candidate score.
Training uses a weighted binary cross-entropy over sampled instances
(every item of the true next basket plus `neg_per_pos` negatives per
positive); inference ranks all items, where the softmax over raw scores
realizes the catalog-probability reading.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np

from . import autograd as ag
from .autograd import ParameterStore, Tape, backward
from .corpus import CLS, N_SPECIALS, SEP
from .encoder import encode, encode_batch, init_encoder_params, make_input_sequence, pad_batch
from .errors import CheckpointError, ContractError, DataError
from .evaluation import RankedList
from .optim import AdamState, adam_step
from .pretraining import (MASKED_ITEM_BIAS, apply_masking, masked_batch_l1, training_rng)

logger = logging.getLogger(__name__)

POOL_WEIGHT = "pool.weight"
POOL_BIAS = "pool.bias"
USER_EMBEDDING = "users.embedding"

PROB_CLAMP = 1e-12


@dataclass
class RecommendationInstance:
    """One (history, candidate) pair; label 1 iff the candidate is in the next basket."""

    user_index: int
    history: list            # list of baskets (lists of vocabulary indices), oldest first
    candidate_item: int
    label: int


@dataclass
class FineTuneHead:
    """Class weights of the cross-entropy objective; tensors live in the store."""

    positive_weight: float = 4.0
    negative_weight: float = 1.0


@dataclass
class PooledHistory:
    pooled: object   # Tensor (D,)
    weights: object  # Tensor (n_history,), sums to 1


def init_finetune_head(store, config, n_users):
    store.create(POOL_WEIGHT, (config.hidden_size, 1), "normal", config.init_std)
    store.create(POOL_BIAS, (1,), "zeros")
    store.create(USER_EMBEDDING, (n_users, config.hidden_size), "normal", config.init_std)


# ---------------------------------------------------------------------------
# packing
# ---------------------------------------------------------------------------

def pack_instance(instance, max_len, positions_per_basket=False):
    """[CLS] history [SEP] candidate [SEP]; oldest history items dropped when over budget.

    Position ids are right-aligned to `max_len` so the candidate always
    occupies position max_len - 2 and the most recent history the same
    ids regardless of history length; inference histories (which run one
    basket longer than any training history) then reuse trained position
    rows instead of hitting untouched ones.
    """
    flat = [(t, item) for t, basket in enumerate(instance.history) for item in basket]
    if not flat:
        raise DataError(f"instance for user {instance.user_index} has an empty history")
    budget = max_len - 4  # CLS + SEP + candidate + SEP
    if budget < 1:
        raise ContractError(f"max_len {max_len} cannot hold a packed instance")
    if len(flat) > budget:
        flat = flat[len(flat) - budget:]
    if not flat:
        raise DataError(f"history of user {instance.user_index} vanished after truncation")

    basket_spans = []
    for t, item in flat:
        if basket_spans and basket_spans[-1][0] == t:
            basket_spans[-1][1].append(item)
        else:
            basket_spans.append((t, [item]))
    spans = [[CLS]] + [span for _, span in basket_spans] + [[SEP], [instance.candidate_item], [SEP]]
    segments = [0] * (1 + len(basket_spans) + 1) + [1, 1]
    return make_input_sequence(spans, segments, positions_per_basket, align_end_to=max_len)


def instance_layout(seq):
    """(candidate_position, history_positions) of a packed instance sequence."""
    sep_positions = np.flatnonzero(seq.token_ids == SEP)
    first_sep = int(sep_positions[0])
    candidate_position = first_sep + 1
    history_positions = np.arange(1, first_sep)
    return candidate_position, history_positions


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

def attention_pool(h_candidate, h_history, store):
    """Candidate-gated softmax pool over history states.

    score_j = W (h_candidate * h_j) + b, weights = softmax over history,
    pooled = sum_j weight_j h_j. CLS/SEP/PAD never reach this function;
    callers pass only real history rows.
    """
    n = h_history.shape[0]
    if n < 1:
        raise ContractError("attention_pool needs at least one history row")
    d = h_history.shape[1]
    gated = ag.mul(h_history, ag.reshape(h_candidate, (1, d)))
    scores = ag.matmul(gated, store[POOL_WEIGHT]) + store[POOL_BIAS]
    weights = ag.softmax(ag.reshape(scores, (n,)), axis=-1)
    pooled = ag.reshape(ag.matmul(ag.reshape(weights, (1, n)), h_history), (d,))
    return PooledHistory(pooled=pooled, weights=weights)


def score_candidate(user_index, packed, store, config):
    """Raw score s_i of one packed (history, candidate) sequence; scalar tensor."""
    hidden = encode(packed, store, config)
    candidate_position, history_positions = instance_layout(packed)
    d = config.hidden_size
    h_i = ag.reshape(ag.slice_axis(hidden, 0, candidate_position, candidate_position + 1), (d,))
    h_history = ag.gather(hidden, history_positions, "hidden")
    pool = attention_pool(h_i, h_history, store)
    v_u = ag.reshape(ag.gather(store[USER_EMBEDDING], np.array([user_index]), USER_EMBEDDING), (d,))
    return ag.sum_(ag.mul(ag.mul(h_i, v_u), pool.pooled))


def _batch_score(batch, candidate_positions, history_mask, user_indices, store, config,
                 train=False, rng=None, probe=None):
    """Scores for a padded batch of packed instances as a (B,) tensor."""
    b, t = batch["token_ids"].shape
    d = config.hidden_size
    hidden = encode_batch(batch, store, config, train=train, rng=rng)
    h_i = ag.rows_at(hidden, candidate_positions)                      # (B, D)
    gated = ag.mul(hidden, ag.reshape(h_i, (b, 1, d)))                 # (B, T, D)
    scores = ag.reshape(ag.matmul(gated, store[POOL_WEIGHT]), (b, t)) + store[POOL_BIAS]
    scores = ag.masked_fill(scores, ~history_mask, -np.inf)
    weights = ag.softmax(scores, axis=-1)                              # zero off-history
    if probe is not None:
        probe.setdefault("pool_weights", []).append(weights.data)
    pooled = ag.sum_(ag.mul(ag.reshape(weights, (b, t, 1)), hidden), axis=1)  # (B, D)
    v_u = ag.gather(store[USER_EMBEDDING], user_indices, USER_EMBEDDING)      # (B, D)
    return ag.sum_(ag.mul(ag.mul(h_i, v_u), pooled), axis=-1)


def _pack_for_batch(instances, config):
    sequences = []
    candidate_positions = []
    for inst in instances:
        seq = pack_instance(inst, config.max_sequence_length, config.positions_per_basket)
        sequences.append(seq)
        candidate_positions.append(instance_layout(seq)[0])
    batch = pad_batch(sequences)
    b, t = batch["token_ids"].shape
    history_mask = np.zeros((b, t), dtype=bool)
    for i, seq in enumerate(sequences):
        _, history_positions = instance_layout(seq)
        history_mask[i, history_positions] = True
    return batch, np.asarray(candidate_positions), history_mask


@dataclass
class ScoredCandidates:
    items: np.ndarray
    scores: np.ndarray
    probabilities: np.ndarray


def score_items(user_index, history, candidate_set, store, config, candidate_batch=128):
    """Score every candidate with its own packed sequence; softmax over the set.

    `history` is a list of baskets (lists of vocabulary indices). With
    the full catalog as candidate_set this realizes the
    catalog-normalized purchase probability.
    """
    candidates = np.asarray(list(candidate_set), dtype=np.int64)
    if candidates.size == 0:
        raise ContractError("score_items needs a non-empty candidate set")
    bad = (candidates < N_SPECIALS) | (candidates >= store["embeddings.token"].shape[0])
    if bad.any():
        raise ContractError(f"candidate {int(candidates[bad][0])} is not a real item index")
    scores = np.empty(candidates.size)
    for start in range(0, candidates.size, candidate_batch):
        chunk = candidates[start:start + candidate_batch]
        instances = [RecommendationInstance(user_index, history, int(c), 0) for c in chunk]
        batch, candidate_positions, history_mask = _pack_for_batch(instances, config)
        s = _batch_score(batch, candidate_positions, history_mask,
                         np.full(len(chunk), user_index), store, config)
        scores[start:start + len(chunk)] = s.data
    shifted = scores - scores.max()
    exp = np.exp(shifted)
    return ScoredCandidates(items=candidates, scores=scores, probabilities=exp / exp.sum())


def recommend_top_k(user_index, history, k, store, config, candidate_batch=128,
                    candidate_set=None):
    """Top-k real items by raw score; ties broken toward the lower vocabulary index."""
    if candidate_set is None:
        candidate_set = range(N_SPECIALS, store["embeddings.token"].shape[0])
    scored = score_items(user_index, history, candidate_set, store, config, candidate_batch)
    n = scored.items.size
    if k > n:
        logger.warning("k=%d exceeds the %d available items; clamping", k, n)
        k = n
    order = np.lexsort((scored.items, -scored.scores))[:k]
    return RankedList(
        user_index=user_index,
        items=[int(scored.items[i]) for i in order],
        scores=[float(scored.scores[i]) for i in order],
    )


def recommend_for_corpus(corpus, store, config, k=5, candidate_batch=128,
                         include_validation=True, exclude_seen=False):
    """A RankedList per user; history = all baskets before the test basket."""
    out = []
    for user in sorted(corpus.split):
        entry = corpus.split[user]
        history = [b.items for b in entry.train]
        if include_validation:
            history = history + [entry.validation.items]
        candidate_set = None
        if exclude_seen:
            seen = {i for b in entry.train for i in b.items}
            candidate_set = [i for i in range(N_SPECIALS, store["embeddings.token"].shape[0])
                             if i not in seen]
        out.append(recommend_top_k(user, history, k, store, config, candidate_batch,
                                   candidate_set))
    return out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def finetune_loss(instances, store, config, head, train=False, rng=None):
    """Weighted binary cross-entropy summed over the batch (scalar tensor)."""
    if not instances:
        raise ContractError("finetune_loss needs a non-empty batch")
    batch, candidate_positions, history_mask = _pack_for_batch(instances, config)
    user_indices = np.asarray([inst.user_index for inst in instances])
    s = _batch_score(batch, candidate_positions, history_mask, user_indices, store, config,
                     train=train, rng=rng)
    labels = np.asarray([float(inst.label) for inst in instances])
    class_weights = np.where(labels > 0.5, head.positive_weight, head.negative_weight)
    p = ag.clip(ag.sigmoid(s), PROB_CLAMP, 1.0 - PROB_CLAMP)
    log_p = ag.log(p)
    log_not_p = ag.log(ag.shift(ag.neg(p), 1.0))
    nll = ag.neg(ag.mul(ag.constant(labels), log_p)
                 + ag.mul(ag.constant(1.0 - labels), log_not_p))
    return ag.sum_(ag.mul(nll, ag.constant(class_weights)))


def build_training_instances(corpus, rng, neg_per_pos=4, negative_sampling="uniform"):
    """One epoch of instances: every next-basket item + sampled negatives.

    For each user and each train step t >= 1, history = train baskets
    before t and targets = train basket t. Negatives are drawn from the
    catalog minus the target basket, uniformly or popularity-weighted.
    """
    n_items = corpus.vocabulary.n_items
    weights = None
    if negative_sampling == "popularity":
        counts = np.ones(n_items)
        for entry in corpus.split.values():
            for basket in entry.train:
                for item in basket.items:
                    counts[item - N_SPECIALS] += 1
        weights = counts / counts.sum()
    elif negative_sampling != "uniform":
        raise ContractError(f"unknown negative_sampling mode {negative_sampling!r}")

    instances = []
    for user in sorted(corpus.split):
        train = corpus.split[user].train
        for t in range(1, len(train)):
            history = [b.items for b in train[:t]]
            target = set(train[t].items)
            for item in train[t].items:
                instances.append(RecommendationInstance(user, history, item, 1))
                for _ in range(neg_per_pos):
                    while True:
                        if weights is None:
                            negative = N_SPECIALS + int(rng.integers(n_items))
                        else:
                            negative = N_SPECIALS + int(rng.choice(n_items, p=weights))
                        if negative not in target:
                            break
                    instances.append(RecommendationInstance(user, history, negative, 0))
    return instances


@dataclass
class FinetuneSettings:
    epochs: int = 2
    batch_size: int = 32
    neg_per_pos: int = 4
    positive_weight: float = 0.0   # 0 resolves to neg_per_pos
    negative_weight: float = 1.0
    learning_rate: float = 2e-5
    seed: int = 0
    aux_mip_weight: float = 0.0
    mask_rate: float = 0.15
    negative_sampling: str = "uniform"


def init_finetune_store(corpus, config, settings, pretrained=None):
    """Fresh store: encoder (+ masked-item machinery for the aux objective)
    with pretrained tensors copied in where names match, new heads fresh."""
    store = ParameterStore(settings.seed)
    init_encoder_params(store, config)
    if settings.aux_mip_weight > 0.0 and MASKED_ITEM_BIAS not in store:
        store.create(MASKED_ITEM_BIAS, (corpus.vocabulary.n_items,), "zeros")
    init_finetune_head(store, config, corpus.n_users)
    if pretrained is not None:
        copied = 0
        for name, array in pretrained.items():
            if name in store and not name.startswith("heads.") and not name.startswith("pool.") \
                    and not name.startswith("users."):
                if store[name].data.shape != array.shape:
                    raise CheckpointError(
                        f"pretrained tensor {name!r} has shape {array.shape}, "
                        f"expected {store[name].data.shape}")
                store[name].data[...] = array
                copied += 1
        logger.info("initialized %d tensors from the pre-trained checkpoint", copied)
    return store


def run_finetune(corpus, config, settings, pretrained=None, step_callback=None):
    """Fine-tune (from scratch or a pre-trained checkpoint's tensors).

    Returns (store, head, adam, history) where history holds one float
    loss per optimization step.
    """
    store = init_finetune_store(corpus, config, settings, pretrained)
    head = FineTuneHead(
        positive_weight=settings.positive_weight or float(settings.neg_per_pos),
        negative_weight=settings.negative_weight,
    )
    adam = AdamState(learning_rate=settings.learning_rate)
    rng = training_rng(settings.seed, stream=2)
    history = []
    step = 0
    for _ in range(settings.epochs):
        instances = build_training_instances(corpus, rng, settings.neg_per_pos,
                                             settings.negative_sampling)
        order = rng.permutation(len(instances))
        for start in range(0, len(order), settings.batch_size):
            chunk = [instances[i] for i in order[start:start + settings.batch_size]]
            with Tape() as tape:
                loss = finetune_loss(chunk, store, config, head, train=True, rng=rng)
                if settings.aux_mip_weight > 0.0:
                    loss = loss + _aux_masked_loss(chunk, store, config, settings, rng)
            if not np.isfinite(loss.data):
                raise ContractError(f"non-finite fine-tune loss at step {step + 1}")
            value = loss.item()
            backward(tape, loss, store)
            adam_step(store, adam)
            step += 1
            history.append(value)
            if step_callback is not None:
                step_callback(step, value)
    return store, head, adam, history


def _aux_masked_loss(instances, store, config, settings, rng):
    """Auxiliary masked-item term over the packed instance sequences."""
    n_items = store["embeddings.token"].shape[0] - N_SPECIALS
    catalog = SimpleNamespace(n_items=n_items)
    examples = []
    for inst in instances:
        seq = pack_instance(inst, config.max_sequence_length, config.positions_per_basket)
        examples.append(apply_masking(seq, settings.mask_rate, rng, catalog))
    l1, _ = masked_batch_l1(examples, store, config, train=True, rng=rng)
    return ag.scale(l1, settings.aux_mip_weight)
