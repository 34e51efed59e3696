"""Transaction logs -> per-user chronological basket sequences.

Covers raw-log parsing, noise filtering to a fixed point, vocabulary
construction, leave-last-two-out splits, a synthetic generator with
planted co-occurrence / sequential structure, and the line-oriented
on-disk corpus format.

Basket boundary rule: one (user, calendar day) = one basket. Duplicate
purchases of an item on the same day collapse to one membership; item
order inside a basket is first-appearance order in the log, which makes
truncation at `max_basket_items` deterministic.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from datetime import date, datetime
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, EmptyCorpusError

logger = logging.getLogger(__name__)

PAD, CLS, SEP, MASK = 0, 1, 2, 3
N_SPECIALS = 4
SPECIAL_NAMES = ["[PAD]", "[CLS]", "[SEP]", "[MASK]"]

BASKETS_FILE = "baskets.tsv"
VOCAB_FILE = "vocabulary.tsv"


@dataclass(frozen=True)
class TransactionRecord:
    user_id: str
    timestamp: date
    item_id: str


@dataclass
class Basket:
    """Items one user bought in one visit; indices refer to the vocabulary."""

    items: list
    time_index: int


@dataclass
class UserHistory:
    user_index: int
    baskets: list


@dataclass
class UserSplit:
    train: list
    validation: Basket
    test: Basket


class Vocabulary:
    """Bijection between item ids and indices; specials occupy 0..3, real items 4.."""

    def __init__(self, item_ids):
        self.index_to_item = list(item_ids)
        self.item_to_index = {item: N_SPECIALS + i for i, item in enumerate(self.index_to_item)}
        if len(self.item_to_index) != len(self.index_to_item):
            raise DataError("duplicate item ids in vocabulary")

    @property
    def n_items(self):
        """Catalog size |I| (real items only)."""
        return len(self.index_to_item)

    @property
    def size(self):
        """Full table size including the 4 special tokens."""
        return N_SPECIALS + len(self.index_to_item)

    def index_of(self, item_id):
        return self.item_to_index[item_id]

    def item_at(self, index):
        if index < N_SPECIALS:
            return SPECIAL_NAMES[index]
        return self.index_to_item[index - N_SPECIALS]

    def real_indices(self):
        return range(N_SPECIALS, self.size)

    def is_real(self, index):
        return N_SPECIALS <= index < self.size


@dataclass
class Corpus:
    users: list
    vocabulary: Vocabulary
    split: dict | None = None

    def user(self, user_index):
        return self.users[user_index]

    @property
    def n_users(self):
        return len(self.users)

    def validate(self):
        """Check the documented invariants; raises DataError on violation."""
        for history in self.users:
            previous = None
            for basket in history.baskets:
                if not basket.items:
                    raise DataError(f"user {history.user_index} has an empty basket")
                if len(set(basket.items)) != len(basket.items):
                    raise DataError(f"user {history.user_index} has duplicate items in a basket")
                for idx in basket.items:
                    if not self.vocabulary.is_real(idx):
                        raise DataError(f"basket item index {idx} not in vocabulary")
                if previous is not None and basket.time_index <= previous:
                    raise DataError(f"user {history.user_index} baskets out of order")
                previous = basket.time_index
        if self.split is not None:
            for user_index, entry in self.split.items():
                baskets = self.users[user_index].baskets
                got = [id(b) for b in entry.train] + [id(entry.validation), id(entry.test)]
                if sorted(got) != sorted(id(b) for b in baskets):
                    raise DataError(f"split of user {user_index} does not cover its baskets")


@dataclass
class ParseResult:
    records: list
    skipped: int


def parse_transactions(lines, schema, delimiter=";", date_format="%Y-%m-%d"):
    """Parse delimiter-separated text with a header row into TransactionRecords.

    `schema` maps the keys user_col / date_col / item_col to header names.
    Rows with missing fields or unparseable dates are counted and skipped;
    a missing mapped column in the header is a ConfigError. An empty
    stream yields an empty result.
    """
    for key in ("user_col", "date_col", "item_col"):
        if key not in schema:
            raise ConfigError(f"schema is missing {key!r}")

    iterator = iter(lines)
    try:
        header_line = next(iterator)
    except StopIteration:
        return ParseResult([], 0)
    header = [c.strip() for c in header_line.rstrip("\r\n").split(delimiter)]
    columns = {}
    for key in ("user_col", "date_col", "item_col"):
        name = schema[key]
        if name not in header:
            raise ConfigError(f"column {name!r} ({key}) not found in header {header}")
        columns[key] = header.index(name)

    needed = max(columns.values()) + 1
    records = []
    skipped = 0
    for line in iterator:
        line = line.rstrip("\r\n")
        if not line:
            continue
        fields = line.split(delimiter)
        if len(fields) < needed:
            skipped += 1
            continue
        user = fields[columns["user_col"]].strip()
        raw_date = fields[columns["date_col"]].strip()
        item = fields[columns["item_col"]].strip()
        if not user or not raw_date or not item:
            skipped += 1
            continue
        try:
            when = datetime.strptime(raw_date, date_format).date()
        except ValueError:
            skipped += 1
            continue
        records.append(TransactionRecord(user, when, item))
    return ParseResult(records, skipped)


def build_corpus(records, min_item_users=10, min_user_items=10, max_basket_items=100,
                 stats_out=None):
    """Group records into baskets, filter noise to a fixed point, build the vocabulary.

    Filtering repeats until stable: items bought by fewer than
    `min_item_users` distinct users go, users with fewer than
    `min_user_items` total purchased items go, baskets are truncated to
    `max_basket_items`, empty baskets are dropped, and users left with
    fewer than 3 baskets are dropped (they cannot contribute to all three
    splits). Each rule can re-trigger the others, hence the loop.
    """
    if not records:
        raise EmptyCorpusError("no transaction records to build from")

    # (user, day) -> ordered dedup'd item list
    per_user: dict = {}
    for record in records:
        day_map = per_user.setdefault(record.user_id, {})
        items = day_map.setdefault(record.timestamp, [])
        if record.item_id not in items:
            items.append(record.item_id)
    baskets_by_user = {
        user: [day_map[d] for d in sorted(day_map)]
        for user, day_map in per_user.items()
    }

    stats = {
        "raw_transactions": len(records),
        "raw_users": len(per_user),
        "raw_items": len({r.item_id for r in records}),
        "removed_items": 0,
        "removed_users_few_items": 0,
        "removed_users_few_baskets": 0,
        "truncated_items": 0,
    }

    changed = True
    while changed:
        changed = False
        # basket truncation (log order is preserved by construction)
        for baskets in baskets_by_user.values():
            for i, basket in enumerate(baskets):
                if len(basket) > max_basket_items:
                    stats["truncated_items"] += len(basket) - max_basket_items
                    baskets[i] = basket[:max_basket_items]
                    changed = True
        # item support = number of distinct users purchasing it
        support: dict = {}
        for user, baskets in baskets_by_user.items():
            for item in {i for basket in baskets for i in basket}:
                support[item] = support.get(item, 0) + 1
        weak_items = {item for item, n in support.items() if n < min_item_users}
        if weak_items:
            stats["removed_items"] += len(weak_items)
            changed = True
            for user, baskets in baskets_by_user.items():
                baskets_by_user[user] = [
                    kept for kept in ([i for i in basket if i not in weak_items]
                                      for basket in baskets) if kept
                ]
        # user activity and minimum basket count
        for user in list(baskets_by_user):
            baskets = baskets_by_user[user]
            total = sum(len(b) for b in baskets)
            if total < min_user_items:
                del baskets_by_user[user]
                stats["removed_users_few_items"] += 1
                changed = True
            elif len(baskets) < 3:
                del baskets_by_user[user]
                stats["removed_users_few_baskets"] += 1
                changed = True

    if stats_out is not None:
        stats_out.update(stats)
    if not baskets_by_user:
        raise EmptyCorpusError(
            "filtering removed every user; removal counts: "
            + ", ".join(f"{k}={v}" for k, v in stats.items()),
            stage_counts=stats,
        )

    remaining_items = sorted({i for baskets in baskets_by_user.values()
                              for basket in baskets for i in basket})
    vocabulary = Vocabulary(remaining_items)
    users = []
    for user_index, user_id in enumerate(sorted(baskets_by_user)):
        baskets = [
            Basket(items=[vocabulary.index_of(i) for i in basket], time_index=t)
            for t, basket in enumerate(baskets_by_user[user_id])
        ]
        users.append(UserHistory(user_index=user_index, baskets=baskets))
    if stats_out is not None:
        stats_out["final_users"] = len(users)
        stats_out["final_items"] = vocabulary.n_items
        stats_out["final_baskets"] = sum(len(u.baskets) for u in users)
    return Corpus(users=users, vocabulary=vocabulary)


def split_corpus(corpus):
    """Populate per-user splits: last basket = test, penultimate = validation, rest = train.

    Users with fewer than 3 baskets cannot be split and are excluded
    (counted in a warning).
    """
    kept = []
    excluded = 0
    for history in corpus.users:
        if len(history.baskets) < 3:
            excluded += 1
        else:
            kept.append(history)
    if excluded:
        logger.warning("split_corpus excluded %d user(s) with fewer than 3 baskets", excluded)
    if not kept:
        raise EmptyCorpusError("no user has the 3 baskets needed for train/validation/test")

    users = []
    split = {}
    for new_index, history in enumerate(kept):
        rebased = UserHistory(user_index=new_index, baskets=history.baskets)
        users.append(rebased)
        split[new_index] = UserSplit(
            train=rebased.baskets[:-2],
            validation=rebased.baskets[-2],
            test=rebased.baskets[-1],
        )
    return Corpus(users=users, vocabulary=corpus.vocabulary, split=split)


# ---------------------------------------------------------------------------
# synthetic corpora with planted structure
# ---------------------------------------------------------------------------

@dataclass
class SyntheticConfig:
    """Generator settings; item references in pairs/rules are 0-based catalog ordinals.

    Baskets are composed from cyclic sliding windows over the pair and
    rule lists (per-user random offset, advancing one slot per basket),
    so consecutive baskets overlap in a learnable way. On top of that
    base, whenever a pair's first member lands in a basket its partner
    joins with probability 1 - noise_rate, and whenever a rule's trigger
    appears in basket t its consequent lands in basket t+1 with
    probability 1 - noise_rate.
    """

    n_users: int
    n_items: int
    n_baskets_per_user: int
    co_occur_pairs: list = field(default_factory=list)
    sequential_rules: list = field(default_factory=list)
    noise_rate: float = 0.0
    seed: int = 0
    pairs_per_basket: int = 3
    filler_items_per_basket: int = 0

    def validate(self):
        if self.n_users < 1 or self.n_items < 2 or self.n_baskets_per_user < 1:
            raise ConfigError("n_users, n_items, n_baskets_per_user must be positive (n_items >= 2)")
        if not (0.0 <= self.noise_rate < 1.0):
            raise ConfigError(f"noise_rate must be in [0, 1), got {self.noise_rate}")
        if self.n_items < 2 * len(self.co_occur_pairs) or self.n_items < 2 * len(self.sequential_rules):
            raise ConfigError("n_items must be at least twice the rule count")
        for a, b in list(self.co_occur_pairs) + list(self.sequential_rules):
            if not (0 <= a < self.n_items and 0 <= b < self.n_items):
                raise ConfigError(f"rule ({a}, {b}) references an item outside 0..{self.n_items - 1}")
            if a == b:
                raise ConfigError(f"rule ({a}, {b}) must name two different items")
        if not self.co_occur_pairs and not self.sequential_rules and self.filler_items_per_basket < 1:
            raise ConfigError("with no pairs and no rules, filler_items_per_basket must be >= 1")


def generate_synthetic(config):
    """Build a deterministic Corpus with the planted structure of `config`.

    Identical config + seed gives a byte-identical serialized corpus.
    The split is populated when users have >= 3 baskets.
    """
    config.validate()
    rng = np.random.Generator(np.random.PCG64(config.seed))
    partner_of = {a: b for a, b in config.co_occur_pairs}
    consequent_of = {x: y for x, y in config.sequential_rules}
    n_pairs = len(config.co_occur_pairs)
    n_rules = len(config.sequential_rules)

    item_ids = [f"item_{i:04d}" for i in range(config.n_items)]
    vocabulary = Vocabulary(item_ids)

    users = []
    for user_index in range(config.n_users):
        pair_offset = int(rng.integers(n_pairs)) if n_pairs else 0
        rule_offset = int(rng.integers(n_rules)) if n_rules else 0
        pending: list = []
        baskets = []
        for t in range(config.n_baskets_per_user):
            base = []
            if n_pairs:
                width = min(config.pairs_per_basket, n_pairs)
                for w in range(width):
                    base.append(config.co_occur_pairs[(pair_offset + t + w) % n_pairs][0])
            if n_rules:
                width = min(config.pairs_per_basket, n_rules)
                for w in range(width):
                    base.append(config.sequential_rules[(rule_offset + t + w) % n_rules][0])
            base.extend(pending)
            for _ in range(config.filler_items_per_basket):
                base.append(int(rng.integers(config.n_items)))

            items = []
            for ordinal in base:
                if ordinal not in items:
                    items.append(ordinal)
            # co-occurrence closure over everything now in the basket
            queue = list(items)
            while queue:
                ordinal = queue.pop(0)
                partner = partner_of.get(ordinal)
                if partner is not None and partner not in items:
                    if rng.random() >= config.noise_rate:
                        items.append(partner)
                        queue.append(partner)
            # schedule consequents for the next basket
            pending = []
            if t + 1 < config.n_baskets_per_user:
                for ordinal in items:
                    consequent = consequent_of.get(ordinal)
                    if consequent is not None and rng.random() >= config.noise_rate:
                        pending.append(consequent)
            baskets.append(Basket(items=[N_SPECIALS + o for o in items], time_index=t))
        users.append(UserHistory(user_index=user_index, baskets=baskets))

    corpus = Corpus(users=users, vocabulary=vocabulary)
    if config.n_baskets_per_user >= 3:
        corpus = split_corpus(corpus)
    return corpus


# ---------------------------------------------------------------------------
# on-disk format (public contract)
# ---------------------------------------------------------------------------

def save_corpus(corpus, directory):
    """Write baskets.tsv (user<TAB>time<TAB>item,item,...) and vocabulary.tsv (index<TAB>id)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    basket_lines = []
    for history in corpus.users:
        for basket in history.baskets:
            items = ",".join(str(i) for i in basket.items)
            basket_lines.append(f"{history.user_index}\t{basket.time_index}\t{items}")
    (directory / BASKETS_FILE).write_text("\n".join(basket_lines) + "\n", encoding="utf-8")
    vocab_lines = [f"{i}\t{SPECIAL_NAMES[i]}" for i in range(N_SPECIALS)]
    vocab_lines.extend(
        f"{N_SPECIALS + i}\t{item}" for i, item in enumerate(corpus.vocabulary.index_to_item))
    (directory / VOCAB_FILE).write_text("\n".join(vocab_lines) + "\n", encoding="utf-8")
    return directory


def load_corpus(directory):
    """Read a corpus directory written by save_corpus; re-derives the split."""
    directory = Path(directory)
    vocab_path = directory / VOCAB_FILE
    baskets_path = directory / BASKETS_FILE
    if not vocab_path.exists() or not baskets_path.exists():
        raise DataError(f"no corpus at {directory} (need {BASKETS_FILE} and {VOCAB_FILE})")

    items = []
    for line in vocab_path.read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        index_text, _, item = line.partition("\t")
        index = int(index_text)
        if index < N_SPECIALS:
            continue
        if index != N_SPECIALS + len(items):
            raise DataError(f"vocabulary indices out of order at {line!r}")
        items.append(item)
    vocabulary = Vocabulary(items)

    by_user: dict = {}
    for line in baskets_path.read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        user_text, time_text, item_text = line.split("\t")
        basket = Basket(items=[int(i) for i in item_text.split(",")], time_index=int(time_text))
        by_user.setdefault(int(user_text), []).append(basket)
    users = []
    for user_index in sorted(by_user):
        if user_index != len(users):
            raise DataError(f"user indices are not contiguous at {user_index}")
        baskets = sorted(by_user[user_index], key=lambda b: b.time_index)
        users.append(UserHistory(user_index=user_index, baskets=baskets))
    corpus = Corpus(users=users, vocabulary=vocabulary)
    if all(len(u.baskets) >= 3 for u in users):
        corpus = split_corpus(corpus)
    return corpus
