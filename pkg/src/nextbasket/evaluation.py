"""Ranking quality over the test split: F1@K, NDCG@K, and the TOP baseline.

Per-user scores are averaged uniformly over users. Items the user bought
during training stay eligible (grocery repurchase is the norm); callers
that want novelty filtering do it at recommendation time.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

logger = logging.getLogger(__name__)

RECOMMENDATIONS_FILE = "recommendations.tsv"
METRICS_TABLE_FILE = "metrics.txt"
METRICS_KV_FILE = "metrics.kv"
PER_USER_FILE = "per_user.tsv"


@dataclass
class RankedList:
    """Top-K items for one user, best first, with their scores."""

    user_index: int
    items: list
    scores: list

    def validate(self):
        if len(self.items) != len(self.scores):
            raise DataError("ranked list items/scores length mismatch")
        if len(set(self.items)) != len(self.items):
            raise DataError(f"ranked list for user {self.user_index} has duplicates")
        if any(a < b for a, b in zip(self.scores, self.scores[1:])):
            raise DataError(f"ranked list for user {self.user_index} has increasing scores")


@dataclass
class Metrics:
    f1_at_k: float
    ndcg_at_k: float
    k: int
    n_users: int


def _top_items(recs, k):
    items = recs.items if isinstance(recs, RankedList) else list(recs)
    return items[:k]


def _truth_items(truth):
    return set(truth.items) if hasattr(truth, "items") else set(truth)


def f1_at_k(recs, truth, k):
    """F1 of the top-k list: precision |hits|/k, recall |hits|/|truth|."""
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    truth_set = _truth_items(truth)
    if not truth_set:
        raise DataError("empty ground-truth basket")
    hits = len(set(_top_items(recs, k)) & truth_set)
    precision = hits / k
    recall = hits / len(truth_set)
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def ndcg_at_k(recs, truth, k):
    """Rank-discounted overlap: DCG over hit ranks / ideal DCG at min(k, |truth|)."""
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    truth_set = _truth_items(truth)
    if not truth_set:
        raise DataError("empty ground-truth basket")
    dcg = sum(1.0 / np.log2(rank + 2.0)
              for rank, item in enumerate(_top_items(recs, k)) if item in truth_set)
    ideal = sum(1.0 / np.log2(rank + 2.0) for rank in range(min(k, len(truth_set))))
    return dcg / ideal


def top_baseline(corpus, k):
    """Recommend the k most train-purchased items (ties: lower index) to every user."""
    counts: dict = {}
    for entry in corpus.split.values():
        for basket in entry.train:
            for item in basket.items:
                counts[item] = counts.get(item, 0) + 1
    ranked = sorted(counts, key=lambda item: (-counts[item], item))[:k]
    scores = [float(counts[item]) for item in ranked]
    return [RankedList(user_index=u, items=list(ranked), scores=list(scores))
            for u in sorted(corpus.split)]


def evaluate(recommendations, corpus, k=5):
    """Aggregate F1@k and NDCG@k over the test split.

    `recommendations` is a list of RankedList (or a user->RankedList
    dict) covering every test user; a missing user is a hard error.
    Returns (Metrics, per_user_rows) where each row is
    (user_index, f1, ndcg).
    """
    if corpus.split is None:
        raise DataError("corpus has no split to evaluate against")
    by_user = (recommendations if isinstance(recommendations, dict)
               else {r.user_index: r for r in recommendations})
    missing = [u for u in corpus.split if u not in by_user]
    if missing:
        raise DataError(f"no recommendations for user indices {sorted(missing)}")

    rows = []
    skipped_empty = 0
    for user in sorted(corpus.split):
        truth = corpus.split[user].test
        if not truth.items:
            skipped_empty += 1
            continue
        recs = by_user[user]
        rows.append((user, f1_at_k(recs, truth, k), ndcg_at_k(recs, truth, k)))
    if skipped_empty:
        logger.warning("evaluate skipped %d user(s) with empty test baskets", skipped_empty)
    if not rows:
        raise DataError("no user had a non-empty test basket")
    metrics = Metrics(
        f1_at_k=float(np.mean([r[1] for r in rows])),
        ndcg_at_k=float(np.mean([r[2] for r in rows])),
        k=k,
        n_users=len(rows),
    )
    return metrics, rows


# ---------------------------------------------------------------------------
# report and interchange files
# ---------------------------------------------------------------------------

def write_recommendations(path, ranked_lists):
    """user_index<TAB>item,item,...<TAB>score,score,... - one line per user."""
    lines = []
    for recs in sorted(ranked_lists, key=lambda r: r.user_index):
        items = ",".join(str(i) for i in recs.items)
        scores = ",".join(repr(float(s)) for s in recs.scores)
        lines.append(f"{recs.user_index}\t{items}\t{scores}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_recommendations(path):
    ranked = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        user_text, item_text, score_text = line.split("\t")
        ranked.append(RankedList(
            user_index=int(user_text),
            items=[int(i) for i in item_text.split(",")],
            scores=[float(s) for s in score_text.split(",")],
        ))
    return ranked


def write_metrics_table(path, rows):
    """Plain-text comparison table; `rows` are (model_name, Metrics)."""
    k = rows[0][1].k if rows else 0
    name_width = max([len("Model")] + [len(name) for name, _ in rows])
    f1_header = f"F1-score@{k}"
    lines = [f"{'Model'.ljust(name_width)}  {f1_header}  NDCG@{k}"]
    for name, metrics in rows:
        f1_text = f"{metrics.f1_at_k:.6f}".ljust(len(f1_header))
        lines.append(f"{name.ljust(name_width)}  {f1_text}  {metrics.ndcg_at_k:.6f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_metrics_kv(path, rows):
    lines = []
    for name, metrics in rows:
        lines.append(f"{name}.f1_at_{metrics.k}={metrics.f1_at_k:.10f}")
        lines.append(f"{name}.ndcg_at_{metrics.k}={metrics.ndcg_at_k:.10f}")
        lines.append(f"{name}.n_users={metrics.n_users}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_per_user(path, per_user_rows):
    lines = [f"{user}\t{f1:.10f}\t{ndcg:.10f}" for user, f1, ndcg in per_user_rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
