"""Command-line surface wiring the pipeline end to end.

Subcommands: ingest, synth, pretrain, finetune, recommend, evaluate.
Settings come from plain key=value config files overridden by repeatable
`--set key=value` flags (flags win); `--seed` and `--out` are shorthand
for the keys of the same name. Unknown keys are rejected. Every run
writes its fully resolved configuration to `<out>/config.resolved`, and
reruns from that file reproduce the outputs bit for bit.

Errors exit nonzero with a single `error: <category>: <message>` line on
stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import checkpoint as ckpt
from . import corpus as corpus_mod
from . import evaluation, finetune, pretraining
from .encoder import EncoderConfig
from .errors import ConfigError
from .evaluation import (METRICS_KV_FILE, METRICS_TABLE_FILE, PER_USER_FILE,
                         RECOMMENDATIONS_FILE)

logger = logging.getLogger(__name__)

RESOLVED_CONFIG_FILE = "config.resolved"
LOSS_LOG_FILE = "loss.log"
CHECKPOINT_DIR = "checkpoint"
INGEST_STATS_FILE = "ingest_stats.kv"

_REQUIRED = object()


def _parse_bool(text):
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_pairs(text):
    """'0:1,2:3' -> [(0, 1), (2, 3)]; empty string -> []."""
    text = text.strip()
    if not text:
        return []
    pairs = []
    for part in text.split(","):
        a, sep, b = part.partition(":")
        if not sep:
            raise ConfigError(f"expected 'a:b' rule syntax, got {part!r}")
        pairs.append((int(a), int(b)))
    return pairs


_ENCODER_KEYS = {
    "hidden_size": (int, "64"),
    "num_layers": (int, "2"),
    "num_heads": (int, "2"),
    "feed_forward_size": (int, "0"),
    "max_sequence_length": (int, "128"),
    "dropout_rate": (float, "0.1"),
    "init_std": (float, "0.02"),
    "positions_per_basket": (_parse_bool, "false"),
}

REGISTRY = {
    "ingest": {
        "input": (str, _REQUIRED),
        "delimiter": (str, ";"),
        "user_col": (str, "user"),
        "date_col": (str, "date"),
        "item_col": (str, "item"),
        "date_format": (str, "%Y-%m-%d"),
        "min_item_users": (int, "10"),
        "min_user_items": (int, "10"),
        "max_basket_items": (int, "100"),
    },
    "synth": {
        "n_users": (int, "100"),
        "n_items": (int, "50"),
        "n_baskets_per_user": (int, "5"),
        "co_occur_pairs": (_parse_pairs, ""),
        "sequential_rules": (_parse_pairs, ""),
        "noise_rate": (float, "0.0"),
        "pairs_per_basket": (int, "3"),
        "filler_items_per_basket": (int, "0"),
    },
    "pretrain": {
        "corpus": (str, _REQUIRED),
        **_ENCODER_KEYS,
        "batch_size": (int, "32"),
        "steps": (int, "40000"),
        "mask_rate": (float, "0.15"),
        "mask_token_prob": (float, "0.8"),
        "random_token_prob": (float, "0.1"),
        "negative_mode": (str, "same_user"),
        "learning_rate": (float, "0.00002"),
        "mip_same_basket_only": (_parse_bool, "false"),
        "checkpoint_every": (int, "0"),
        "resume": (str, ""),
    },
    "finetune": {
        "corpus": (str, _REQUIRED),
        "init_checkpoint": (str, ""),
        **_ENCODER_KEYS,
        "epochs": (int, "2"),
        "batch_size": (int, "32"),
        "neg_per_pos": (int, "4"),
        "positive_weight": (float, "0"),
        "negative_weight": (float, "1"),
        "learning_rate": (float, "0.00002"),
        "aux_mip_weight": (float, "0"),
        "mask_rate": (float, "0.15"),
        "negative_sampling": (str, "uniform"),
    },
    "recommend": {
        "corpus": (str, _REQUIRED),
        "checkpoint": (str, _REQUIRED),
        "k": (int, "5"),
        "candidate_batch": (int, "128"),
        "history": (str, "train+validation"),
        "exclude_seen": (_parse_bool, "false"),
    },
    "evaluate": {
        "corpus": (str, _REQUIRED),
        "recs": (str, ""),
        "baseline": (str, ""),
        "model_name": (str, "model"),
        "k": (int, "5"),
    },
}

for _sub in REGISTRY.values():
    _sub["seed"] = (int, "0")
    _sub["out"] = (str, _REQUIRED)


def _read_config_file(path):
    values = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"malformed config line {raw!r}")
        values[key.strip()] = value.strip()
    return values


def resolve_config(subcommand, file_values, set_values, seed=None, out=None):
    """Merge defaults < config file < --set < --seed/--out; parse and validate."""
    registry = REGISTRY[subcommand]
    raw = {key: default for key, (_, default) in registry.items() if default is not _REQUIRED}
    for source in (file_values, set_values):
        for key, value in source.items():
            if key not in registry:
                raise ConfigError(f"unknown config key {key!r} for {subcommand}")
            raw[key] = value
    if seed is not None:
        raw["seed"] = str(seed)
    if out is not None:
        raw["out"] = out
    missing = [key for key, (_, default) in registry.items()
               if default is _REQUIRED and key not in raw]
    if missing:
        raise ConfigError(f"missing required key(s) {missing} for {subcommand}")
    typed = {}
    for key, value in raw.items():
        parse, _ = registry[key]
        try:
            typed[key] = parse(value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
    return typed, raw


def _write_resolved(out_dir, raw):
    lines = [f"{key}={raw[key]}" for key in sorted(raw)]
    (out_dir / RESOLVED_CONFIG_FILE).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _encoder_config(cfg, vocab_size):
    return EncoderConfig(
        vocab_size=vocab_size,
        hidden_size=cfg["hidden_size"],
        num_layers=cfg["num_layers"],
        num_heads=cfg["num_heads"],
        feed_forward_size=cfg["feed_forward_size"],
        max_sequence_length=cfg["max_sequence_length"],
        dropout_rate=cfg["dropout_rate"],
        init_std=cfg["init_std"],
        positions_per_basket=cfg["positions_per_basket"],
    )


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_ingest(cfg, out_dir):
    with open(cfg["input"], encoding="utf-8") as stream:
        parsed = corpus_mod.parse_transactions(
            stream,
            schema={"user_col": cfg["user_col"], "date_col": cfg["date_col"],
                    "item_col": cfg["item_col"]},
            delimiter=cfg["delimiter"],
            date_format=cfg["date_format"],
        )
    stats = {}
    corpus = corpus_mod.build_corpus(
        parsed.records,
        min_item_users=cfg["min_item_users"],
        min_user_items=cfg["min_user_items"],
        max_basket_items=cfg["max_basket_items"],
        stats_out=stats,
    )
    corpus = corpus_mod.split_corpus(corpus)
    corpus_mod.save_corpus(corpus, out_dir)
    stats["skipped_rows"] = parsed.skipped
    lines = [f"{key}={stats[key]}" for key in sorted(stats)]
    (out_dir / INGEST_STATS_FILE).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"ingest: {stats['raw_transactions']} transactions, {stats['raw_users']} users, "
          f"{stats['raw_items']} items -> {stats['final_users']} users, "
          f"{stats['final_items']} items after filtering")
    return 0


def cmd_synth(cfg, out_dir):
    spec = corpus_mod.SyntheticConfig(
        n_users=cfg["n_users"],
        n_items=cfg["n_items"],
        n_baskets_per_user=cfg["n_baskets_per_user"],
        co_occur_pairs=cfg["co_occur_pairs"],
        sequential_rules=cfg["sequential_rules"],
        noise_rate=cfg["noise_rate"],
        seed=cfg["seed"],
        pairs_per_basket=cfg["pairs_per_basket"],
        filler_items_per_basket=cfg["filler_items_per_basket"],
    )
    corpus = corpus_mod.generate_synthetic(spec)
    corpus_mod.save_corpus(corpus, out_dir)
    print(f"synth: {corpus.n_users} users, {corpus.vocabulary.n_items} items, "
          f"{sum(len(u.baskets) for u in corpus.users)} baskets")
    return 0


def _loss_logger(out_dir, mode="w"):
    path = out_dir / LOSS_LOG_FILE
    handle = open(path, mode, encoding="utf-8")
    return handle


def cmd_pretrain(cfg, out_dir):
    corpus = corpus_mod.load_corpus(cfg["corpus"])
    settings = pretraining.PretrainSettings(
        batch_size=cfg["batch_size"],
        steps=cfg["steps"],
        mask_rate=cfg["mask_rate"],
        mask_token_prob=cfg["mask_token_prob"],
        random_token_prob=cfg["random_token_prob"],
        negative_mode=cfg["negative_mode"],
        learning_rate=cfg["learning_rate"],
        seed=cfg["seed"],
        mip_same_basket_only=cfg["mip_same_basket_only"],
    )
    resume = None
    if cfg["resume"]:
        tensors, header = ckpt.load_checkpoint(cfg["resume"])
        params, adam, rng = ckpt.split_training_state(tensors, header)
        first_step = int(header["train.step"]) + 1
        config = EncoderConfig.from_header(header)
        resume = (params, adam, rng, first_step)
    else:
        config = _encoder_config(cfg, corpus.vocabulary.size)

    periodic = cfg["checkpoint_every"]
    with _loss_logger(out_dir, "a" if cfg["resume"] else "w") as log:

        def on_step(step, losses, store, adam, rng):
            log.write(f"{step}\t{losses.masked_item!r}\t{losses.next_basket!r}"
                      f"\t{losses.total!r}\n")
            if periodic and step % periodic == 0 and step < settings.steps:
                header = config.to_header()
                header["train.step"] = str(step)
                tensors, full_header = ckpt.pack_training_state(store, adam, rng, header)
                ckpt.save_checkpoint(out_dir / f"checkpoint_step{step:06d}", tensors,
                                     full_header)

        store, adam, rng, _history = pretraining.run_pretraining(
            corpus, config, settings, resume=resume, step_callback=on_step)
    header = config.to_header()
    header["train.step"] = str(settings.steps)
    tensors, header = ckpt.pack_training_state(store, adam, rng, header)
    ckpt.save_checkpoint(out_dir / CHECKPOINT_DIR, tensors, header)
    print(f"pretrain: {settings.steps} steps done, checkpoint at {out_dir / CHECKPOINT_DIR}")
    return 0


def cmd_finetune(cfg, out_dir):
    corpus = corpus_mod.load_corpus(cfg["corpus"])
    settings = finetune.FinetuneSettings(
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        neg_per_pos=cfg["neg_per_pos"],
        positive_weight=cfg["positive_weight"],
        negative_weight=cfg["negative_weight"],
        learning_rate=cfg["learning_rate"],
        seed=cfg["seed"],
        aux_mip_weight=cfg["aux_mip_weight"],
        mask_rate=cfg["mask_rate"],
        negative_sampling=cfg["negative_sampling"],
    )
    pretrained = None
    if cfg["init_checkpoint"]:
        tensors, header = ckpt.load_checkpoint(cfg["init_checkpoint"])
        pretrained = ckpt.split_training_state(tensors, header)[0]
        config = EncoderConfig.from_header(header)
    else:
        config = _encoder_config(cfg, corpus.vocabulary.size)

    with _loss_logger(out_dir) as log:

        def on_step(step, value):
            log.write(f"{step}\t{value!r}\n")

        store, head, adam, _history = finetune.run_finetune(
            corpus, config, settings, pretrained=pretrained, step_callback=on_step)
    header = config.to_header()
    header["finetune.positive_weight"] = repr(head.positive_weight)
    header["finetune.negative_weight"] = repr(head.negative_weight)
    tensors, header = ckpt.pack_training_state(store, adam, None, header)
    ckpt.save_checkpoint(out_dir / CHECKPOINT_DIR, tensors, header)
    print(f"finetune: done, checkpoint at {out_dir / CHECKPOINT_DIR}")
    return 0


def cmd_recommend(cfg, out_dir):
    corpus = corpus_mod.load_corpus(cfg["corpus"])
    tensors, header = ckpt.load_checkpoint(cfg["checkpoint"])
    params = ckpt.split_training_state(tensors, header)[0]
    config = EncoderConfig.from_header(header)
    from .autograd import ParameterStore

    store = ParameterStore(cfg["seed"])
    for name, array in params.items():
        store.add(name, array)
    if cfg["history"] not in ("train+validation", "train"):
        raise ConfigError(f"history must be 'train+validation' or 'train', got {cfg['history']!r}")
    ranked = finetune.recommend_for_corpus(
        corpus, store, config,
        k=cfg["k"],
        candidate_batch=cfg["candidate_batch"],
        include_validation=cfg["history"] == "train+validation",
        exclude_seen=cfg["exclude_seen"],
    )
    evaluation.write_recommendations(out_dir / RECOMMENDATIONS_FILE, ranked)
    print(f"recommend: wrote top-{cfg['k']} lists for {len(ranked)} users")
    return 0


def cmd_evaluate(cfg, out_dir):
    corpus = corpus_mod.load_corpus(cfg["corpus"])
    if bool(cfg["recs"]) == bool(cfg["baseline"]):
        raise ConfigError("evaluate needs exactly one of recs=PATH or baseline=top")
    if cfg["baseline"]:
        if cfg["baseline"] != "top":
            raise ConfigError(f"unknown baseline {cfg['baseline']!r} (only 'top')")
        ranked = evaluation.top_baseline(corpus, cfg["k"])
        name = "TOP"
    else:
        ranked = evaluation.read_recommendations(cfg["recs"])
        name = cfg["model_name"]
    metrics, per_user = evaluation.evaluate(ranked, corpus, k=cfg["k"])
    rows = [(name, metrics)]
    evaluation.write_metrics_table(out_dir / METRICS_TABLE_FILE, rows)
    evaluation.write_metrics_kv(out_dir / METRICS_KV_FILE, rows)
    evaluation.write_per_user(out_dir / PER_USER_FILE, per_user)
    print(f"evaluate: {name} F1@{metrics.k}={metrics.f1_at_k:.6f} "
          f"NDCG@{metrics.k}={metrics.ndcg_at_k:.6f} over {metrics.n_users} users")
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "recommend": cmd_recommend,
    "evaluate": cmd_evaluate,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="nextbasket",
                                     description="next-basket recommendation pipeline")
    subparsers = parser.add_subparsers(dest="subcommand", required=True)
    for name in COMMANDS:
        sub = subparsers.add_parser(name)
        sub.add_argument("--config", default=None, help="key=value config file")
        sub.add_argument("--seed", type=int, default=None)
        sub.add_argument("--out", default=None, help="output directory (owned by this run)")
        sub.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                         help="override one config key (repeatable)")
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        file_values = _read_config_file(args.config) if args.config else {}
        set_values = {}
        for item in args.set:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
            set_values[key.strip()] = value.strip()
        cfg, raw = resolve_config(args.subcommand, file_values, set_values,
                                  seed=args.seed, out=args.out)
        out_dir = Path(cfg["out"])
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_resolved(out_dir, raw)
        return COMMANDS[args.subcommand](cfg, out_dir)
    except Exception as exc:  # uniform single-line error contract
        message = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
