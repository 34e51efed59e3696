"""Context-aware next-basket recommendation engine.

Two-stage training of a transformer encoder over purchase baskets:
an offline stage learns to recover masked items and the order of basket
pairs; the online stage scores (history, candidate) pairs with
candidate-conditioned attention pooling and a user embedding, ranking
the whole catalog for the next visit.
"""

from . import _kernels
from .autograd import ParameterStore, Tape, Tensor, backward
from .corpus import (Basket, Corpus, SyntheticConfig, TransactionRecord, UserHistory,
                     Vocabulary, build_corpus, generate_synthetic, load_corpus,
                     parse_transactions, save_corpus, split_corpus)
from .encoder import EncoderConfig, InputSequence, encode, init_encoder_params
from .evaluation import Metrics, RankedList, evaluate, f1_at_k, ndcg_at_k, top_baseline
from .finetune import (FineTuneHead, FinetuneSettings, RecommendationInstance,
                       attention_pool, finetune_loss, pack_instance, recommend_top_k,
                       run_finetune, score_candidate, score_items)
from .optim import AdamState, adam_step, finite_difference_check
from .pretraining import (PretrainExample, PretrainLosses, PretrainSettings, apply_masking,
                          masked_item_loss, next_basket_loss, pretrain_step, run_pretraining,
                          sample_basket_pair)

__version__ = "0.1.0"

__all__ = [
    "AdamState", "Basket", "Corpus", "EncoderConfig", "FineTuneHead", "FinetuneSettings",
    "InputSequence", "Metrics", "ParameterStore", "PretrainExample", "PretrainLosses",
    "PretrainSettings", "RankedList", "RecommendationInstance", "SyntheticConfig", "Tape",
    "Tensor", "TransactionRecord", "UserHistory", "Vocabulary", "adam_step", "apply_masking",
    "attention_pool", "backward", "build_corpus", "encode", "evaluate", "f1_at_k",
    "finetune_loss", "finite_difference_check", "generate_synthetic", "init_encoder_params",
    "load_corpus", "masked_item_loss", "ndcg_at_k", "next_basket_loss", "pack_instance",
    "parse_transactions", "pretrain_step", "recommend_top_k", "run_finetune",
    "run_pretraining", "sample_basket_pair", "save_corpus", "score_candidate", "score_items",
    "split_corpus", "top_baseline", "_kernels",
]
