"""Packing, attention pooling, scoring chain, weighted loss, top-K ranking."""

import numpy as np
import pytest

import nextbasket.autograd as ag
from nextbasket.autograd import ParameterStore, Tape, backward
from nextbasket.corpus import CLS, N_SPECIALS, SEP
from nextbasket.encoder import encode
from nextbasket.errors import ContractError, DataError
from nextbasket.finetune import (FinetuneSettings, FineTuneHead, RecommendationInstance,
                                 attention_pool, build_training_instances, finetune_loss,
                                 init_finetune_head, init_finetune_store, instance_layout,
                                 pack_instance, recommend_top_k, run_finetune,
                                 score_candidate, score_items)
from nextbasket.optim import finite_difference_check
from tests.conftest import make_model

POOL_W, POOL_B, USERS = "pool.weight", "pool.bias", "users.embedding"


def finetune_model(corpus, seed=0, **overrides):
    store, config = make_model(corpus, seed=seed, with_heads=False, **overrides)
    init_finetune_head(store, config, corpus.n_users)
    return store, config


def instance(user=0, history=((5, 6), (7,)), candidate=8, label=1):
    return RecommendationInstance(user_index=user, history=[list(b) for b in history],
                                  candidate_item=candidate, label=label)


# -- packing ---------------------------------------------------------------------

def test_pack_layout_matches_contract():
    seq = pack_instance(instance(history=[[5, 6]], candidate=7), max_len=16)
    assert seq.token_ids.tolist() == [CLS, 5, 6, SEP, 7, SEP]
    assert seq.segment_ids.tolist() == [0, 0, 0, 0, 1, 1]
    candidate_position, history_positions = instance_layout(seq)
    assert candidate_position == 4
    assert history_positions.tolist() == [1, 2]


def test_pack_truncation_drops_oldest_first():
    history = [[4 + i] for i in range(200)]
    seq = pack_instance(instance(history=history, candidate=210), max_len=128)
    # budget = 128 - 4 specials = 124 newest history items survive
    assert len(seq.token_ids) == 128
    _, history_positions = instance_layout(seq)
    assert len(history_positions) == 124
    assert seq.token_ids[1] == 4 + (200 - 124)  # oldest kept item
    assert seq.token_ids[instance_layout(seq)[0]] == 210  # candidate always retained


def test_pack_deterministic():
    one = pack_instance(instance(), max_len=32)
    two = pack_instance(instance(), max_len=32)
    assert np.array_equal(one.token_ids, two.token_ids)
    assert np.array_equal(one.position_ids, two.position_ids)


def test_pack_empty_history_rejected():
    with pytest.raises(DataError):
        pack_instance(instance(history=[]), max_len=32)


def test_pack_per_basket_positions():
    seq = pack_instance(instance(history=[[5, 6], [7]], candidate=8), max_len=32,
                        positions_per_basket=True)
    # spans: CLS | basket0 | basket1 | SEP | cand | SEP
    assert seq.position_ids.tolist() == [0, 1, 1, 2, 3, 4, 5]


# -- attention pooling --------------------------------------------------------------

def test_pool_identical_rows_uniform_weights(tiny_corpus):
    store, config = finetune_model(tiny_corpus)
    d = config.hidden_size
    row = np.random.default_rng(0).normal(size=d)
    history = ag.Tensor(np.tile(row, (4, 1)))
    pool = attention_pool(ag.Tensor(np.ones(d)), history, store)
    assert np.allclose(pool.weights.data, 0.25)
    assert np.allclose(pool.pooled.data, row)


def test_pool_zero_weight_matrix_gives_mean(tiny_corpus):
    store, config = finetune_model(tiny_corpus)
    store[POOL_W].data[...] = 0.0
    rng = np.random.default_rng(1)
    rows = rng.normal(size=(5, config.hidden_size))
    pool = attention_pool(ag.Tensor(rng.normal(size=config.hidden_size)),
                          ag.Tensor(rows), store)
    assert np.allclose(pool.weights.data, 0.2)
    assert np.allclose(pool.pooled.data, rows.mean(axis=0))


def test_pool_matches_brute_force(tiny_corpus):
    store, config = finetune_model(tiny_corpus)
    rng = np.random.default_rng(2)
    rows = rng.normal(size=(3, config.hidden_size))
    candidate = rng.normal(size=config.hidden_size)
    pool = attention_pool(ag.Tensor(candidate), ag.Tensor(rows), store)

    w = store[POOL_W].data.reshape(-1)
    b = store[POOL_B].data[0]
    scores = np.array([w @ (candidate * row) + b for row in rows])
    exp = np.exp(scores - scores.max())
    alphas = exp / exp.sum()
    pooled = (alphas[:, None] * rows).sum(axis=0)
    assert np.abs(pool.weights.data - alphas).max() < 1e-12
    assert np.abs(pool.pooled.data - pooled).max() < 1e-12
    assert pool.weights.data.sum() == pytest.approx(1.0, abs=1e-9)


def test_pool_empty_history_rejected(tiny_corpus):
    store, config = finetune_model(tiny_corpus)
    with pytest.raises(ContractError):
        attention_pool(ag.Tensor(np.ones(config.hidden_size)),
                       ag.Tensor(np.ones((0, config.hidden_size))), store)


# -- scoring ---------------------------------------------------------------------------

def test_zero_user_vector_zeroes_all_scores(tiny_corpus):
    store, config = finetune_model(tiny_corpus)
    store[USERS].data[...] = 0.0
    packed = pack_instance(instance(), max_len=32)
    assert score_candidate(0, packed, store, config).item() == 0.0


def test_ones_user_vector_gives_plain_dot(tiny_corpus):
    store, config = finetune_model(tiny_corpus)
    store[USERS].data[...] = 1.0
    packed = pack_instance(instance(), max_len=32)
    s = score_candidate(0, packed, store, config).item()

    hidden = encode(packed, store, config).data
    candidate_position, history_positions = instance_layout(packed)
    h_i = hidden[candidate_position]
    pool = attention_pool(ag.Tensor(h_i), ag.Tensor(hidden[history_positions]), store)
    assert s == pytest.approx(float(h_i @ pool.pooled.data), rel=1e-12)


def test_scoring_chain_matches_straight_line_reimplementation(tiny_corpus):
    """Independent numpy evaluation of pool -> user gate -> dot -> softmax."""
    store, config = finetune_model(tiny_corpus, seed=3)
    user = 2
    history = [[5, 6], [7, 9]]
    candidates = [8, 10]

    expected_scores = []
    for candidate in candidates:
        packed = pack_instance(RecommendationInstance(user, history, candidate, 0),
                               config.max_sequence_length)
        hidden = encode(packed, store, config).data
        candidate_position, history_positions = instance_layout(packed)
        h_i = hidden[candidate_position]
        w = store[POOL_W].data.reshape(-1)
        b = store[POOL_B].data[0]
        scores = np.array([w @ (h_i * hidden[j]) + b for j in history_positions])
        exp = np.exp(scores - scores.max())
        alphas = exp / exp.sum()
        v_b = (alphas[:, None] * hidden[history_positions]).sum(axis=0)
        v_u = store[USERS].data[user]
        expected_scores.append(float(h_i @ (v_u * v_b)))
    expected_scores = np.array(expected_scores)
    shifted = np.exp(expected_scores - expected_scores.max())
    expected_probs = shifted / shifted.sum()

    scored = score_items(user, history, candidates, store, config)
    assert np.abs(scored.scores - expected_scores).max() < 1e-10
    assert np.abs(scored.probabilities - expected_probs).max() < 1e-10

    for candidate, expected in zip(candidates, expected_scores):
        packed = pack_instance(RecommendationInstance(user, history, candidate, 0),
                               config.max_sequence_length)
        assert score_candidate(user, packed, store, config).item() == pytest.approx(
            expected, abs=1e-12)


def test_singleton_candidate_probability_one(tiny_corpus):
    store, config = finetune_model(tiny_corpus)
    scored = score_items(0, [[5, 6]], [9], store, config)
    assert scored.probabilities.tolist() == [1.0]


def test_probabilities_sum_to_one_and_shift_invariant(tiny_corpus):
    store, config = finetune_model(tiny_corpus)
    candidates = list(tiny_corpus.vocabulary.real_indices())
    scored = score_items(1, [[5, 6], [7]], candidates, store, config)
    assert scored.probabilities.sum() == pytest.approx(1.0, abs=1e-9)
    shifted = np.exp((scored.scores + 7.0) - (scored.scores + 7.0).max())
    assert np.abs(shifted / shifted.sum() - scored.probabilities).max() < 1e-12


def test_candidate_context_sensitivity(tiny_corpus):
    """The same candidate's hidden state differs across histories."""
    store, config = finetune_model(tiny_corpus)
    packed_a = pack_instance(instance(history=[[5, 6]], candidate=8), max_len=32)
    packed_b = pack_instance(instance(history=[[9, 11]], candidate=8), max_len=32)
    h_a = encode(packed_a, store, config).data[instance_layout(packed_a)[0]]
    h_b = encode(packed_b, store, config).data[instance_layout(packed_b)[0]]
    assert np.abs(h_a - h_b).max() > 0


# -- loss --------------------------------------------------------------------------------

def test_uninformative_predictor_loss_is_batch_log_two(tiny_corpus):
    store, config = finetune_model(tiny_corpus)
    store[USERS].data[...] = 0.0  # every score 0, p = 0.5
    head = FineTuneHead(positive_weight=1.0, negative_weight=1.0)
    instances = [instance(user=u % tiny_corpus.n_users, label=u % 2) for u in range(6)]
    loss = finetune_loss(instances, store, config, head)
    assert loss.item() == pytest.approx(6 * np.log(2.0), rel=1e-12)


def test_positive_weight_scales_gradient_exactly(tiny_corpus):
    store, config = finetune_model(tiny_corpus)
    inst = instance(label=1)

    def grad_norm(weight):
        store.zero_grad()
        head = FineTuneHead(positive_weight=weight, negative_weight=1.0)
        with Tape() as tape:
            loss = finetune_loss([inst], store, config, head)
        backward(tape, loss, store)
        return {name: p.grad.copy() for name, p in store.items()}

    g1 = grad_norm(1.0)
    g10 = grad_norm(10.0)
    for name in g1:
        # exact 10x as real numbers; atol absorbs cancellation dust near zero
        assert np.allclose(g10[name], 10.0 * g1[name], rtol=1e-9, atol=1e-15)


def test_finetune_loss_gradient_matches_finite_differences(tiny_corpus):
    store, config = finetune_model(tiny_corpus, hidden_size=8, num_layers=1)
    head = FineTuneHead(positive_weight=2.0, negative_weight=1.0)
    instances = [instance(user=0, label=1), instance(user=1, candidate=9, label=0)]

    def loss_fn(s):
        return finetune_loss(instances, s, config, head)

    err = finite_difference_check(loss_fn, store, n_coordinates=80,
                                  rng=np.random.default_rng(5))
    assert err < 1e-3


def test_empty_batch_rejected(tiny_corpus):
    store, config = finetune_model(tiny_corpus)
    with pytest.raises(ContractError):
        finetune_loss([], store, config, FineTuneHead())


# -- instances and ranking ------------------------------------------------------------------

def test_training_instances_cover_next_baskets(tiny_corpus, rng):
    instances = build_training_instances(tiny_corpus, rng, neg_per_pos=3)
    by_label = {0: 0, 1: 0}
    for inst in instances:
        by_label[inst.label] += 1
        if inst.label == 0:
            assert inst.candidate_item >= N_SPECIALS
    assert by_label[0] == 3 * by_label[1]
    expected_positives = sum(
        sum(len(b.items) for b in entry.train[1:]) for entry in tiny_corpus.split.values())
    assert by_label[1] == expected_positives


def test_negatives_never_in_target_basket(tiny_corpus, rng):
    instances = build_training_instances(tiny_corpus, rng, neg_per_pos=4)
    step_of = {}
    for user, entry in tiny_corpus.split.items():
        for t in range(1, len(entry.train)):
            step_of[(user, t)] = set(entry.train[t].items)
    for inst in instances:
        if inst.label == 0:
            target = step_of[(inst.user_index, len(inst.history))]
            assert inst.candidate_item not in target


def test_popularity_sampling_mode(tiny_corpus, rng):
    instances = build_training_instances(tiny_corpus, rng, neg_per_pos=2,
                                         negative_sampling="popularity")
    assert any(inst.label == 0 for inst in instances)
    with pytest.raises(ContractError):
        build_training_instances(tiny_corpus, rng, negative_sampling="nope")


def test_top_k_clamps_and_orders(tiny_corpus):
    store, config = finetune_model(tiny_corpus)
    ranked = recommend_top_k(0, [[5, 6]], k=5, store=store, config=config,
                             candidate_set=[6, 7, 8])
    assert len(ranked.items) == 3
    assert ranked.scores == sorted(ranked.scores, reverse=True)
    ranked.validate()


def test_ranking_invariant_to_constant_score_shift(tiny_corpus):
    store, config = finetune_model(tiny_corpus)
    scored = score_items(0, [[5, 6], [7]], list(tiny_corpus.vocabulary.real_indices()),
                         store, config)
    base = np.lexsort((scored.items, -scored.scores))
    shifted = np.lexsort((scored.items, -(scored.scores + 123.456)))
    assert np.array_equal(base, shifted)


def test_tied_scores_break_toward_lower_index(tiny_corpus):
    store, config = finetune_model(tiny_corpus)
    # make items 9 and 10 indistinguishable: identical embedding rows
    store["embeddings.token"].data[10] = store["embeddings.token"].data[9]
    for _ in range(3):
        ranked = recommend_top_k(0, [[5, 6]], k=tiny_corpus.vocabulary.n_items,
                                 store=store, config=config)
        pos_9 = ranked.items.index(9)
        pos_10 = ranked.items.index(10)
        assert ranked.scores[pos_9] == ranked.scores[pos_10]
        assert pos_9 + 1 == pos_10


def test_run_finetune_smoke_and_aux_objective(tiny_sequential_corpus):
    config_kwargs = dict(hidden_size=16, num_layers=1)
    store, config = finetune_model(tiny_sequential_corpus, **config_kwargs)
    settings = FinetuneSettings(epochs=1, batch_size=16, neg_per_pos=1,
                                learning_rate=1e-3, seed=0)
    store, head, adam, history = run_finetune(tiny_sequential_corpus, config, settings)
    assert len(history) > 0 and np.isfinite(history).all()
    assert head.positive_weight == 1.0  # resolves to neg_per_pos

    aux_settings = FinetuneSettings(epochs=1, batch_size=16, neg_per_pos=1,
                                    learning_rate=1e-3, seed=0, aux_mip_weight=0.5)
    aux_store, _, _, aux_history = run_finetune(tiny_sequential_corpus, config, aux_settings)
    assert "heads.masked_item.bias" in aux_store
    assert aux_history[0] != history[0]  # the auxiliary term contributes


def test_scratch_vs_pretrained_initialization(tiny_corpus):
    store, config = finetune_model(tiny_corpus, seed=1)
    pretrained = {name: p.data.copy() for name, p in store.items()
                  if name.startswith(("embeddings.", "layer"))}
    settings = FinetuneSettings(seed=2)
    warm = init_finetune_store(tiny_corpus, config, settings, pretrained)
    cold = init_finetune_store(tiny_corpus, config, settings, None)
    assert np.array_equal(warm["embeddings.token"].data, pretrained["embeddings.token"])
    assert not np.array_equal(cold["embeddings.token"].data, pretrained["embeddings.token"])
