"""Command-line pipeline driver.

Subcommands: ``preprocess`` (anonymize, truncate, tokenize, bin, compose
control prefixes, emit binary datasets), ``train``, ``summarize`` (decode
under user control flags), ``evaluate``, ``align`` and ``synth``
(synthetic corpus generators).

Every subcommand accepts ``--config FILE`` holding flat ``key = value``
lines; explicit flags override the file, the file overrides defaults,
and unknown keys are rejected. The fully resolved configuration is
logged to stderr before the command runs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import corpus as corpus_mod
from . import datasets as datasets_mod
from . import decoding as decoding_mod
from . import metrics as metrics_mod
from . import tokenization as tok_mod
from . import training as training_mod
from .corpus import (
    ArticleRecord,
    ControlSpec,
    LengthBinner,
    align_summary,
    anonymize,
    build_remainder_source,
    build_source,
    compose_control_prefix,
    deanonymize,
    make_remainder_examples,
)
from .model import ConvSeq2Seq, ModelConfig


class CliError(ValueError):
    """A user-facing configuration or input problem."""


# ---------------------------------------------------------------------------
# config resolution


def _read_config_file(path) -> dict:
    values = {}
    try:
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise CliError(f"{path}:{lineno}: expected key = value")
                key, raw = line.split("=", 1)
                values[key.strip().replace("-", "_")] = raw.strip()
    except OSError as exc:
        raise CliError(f"cannot read config file: {exc}")
    return values


def _coerce(raw: str, default):
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise CliError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, list):
        return [part.strip() for part in raw.split(",") if part.strip()]
    return raw


def resolve_config(command: str, defaults: dict, flag_values: dict) -> dict:
    """defaults < config file < explicit flags; unknown keys rejected."""
    cfg = dict(defaults)
    config_path = flag_values.pop("config", None)
    if config_path:
        for key, raw in _read_config_file(config_path).items():
            if key not in defaults:
                raise CliError(f"unknown config key {key!r} for {command}")
            cfg[key] = _coerce(raw, defaults[key])
    cfg.update(flag_values)
    for key, default in defaults.items():
        if isinstance(default, list):  # flags may arrive comma-joined
            cfg[key] = [part for item in cfg[key]
                        for part in str(item).split(",") if part]
    for key in sorted(cfg):
        print(f"# {command}.{key} = {cfg[key]}", file=sys.stderr)
    return cfg


def _require(cfg: dict, *keys):
    for key in keys:
        if cfg.get(key) in ("", None):
            raise CliError(f"missing required setting {key!r}")


# ---------------------------------------------------------------------------
# shared plumbing


def _anonymized_truncated(records, limit: int):
    out = []
    for rec in records:
        art, summ, mapping = anonymize(rec.article_sentences,
                                       rec.summary_sentences,
                                       rec.entity_mentions)
        out.append(ArticleRecord(
            id=rec.id, source=rec.source,
            article_sentences=corpus_mod.truncate_sentences(art, limit),
            summary_sentences=summ, entity_mentions=mapping))
    return out


def _tokenize_records(records, bpe):
    """Re-tokenize every sentence into subword space (reserved tokens pass
    through unsplit)."""
    out = []
    for rec in records:
        out.append(ArticleRecord(
            id=rec.id, source=rec.source,
            article_sentences=[bpe.tokenize_words(s)
                               for s in rec.article_sentences],
            summary_sentences=[bpe.tokenize_words(s)
                               for s in rec.summary_sentences],
            entity_mentions=rec.entity_mentions))
    return out


def _load_vocab_and_merges(vocab_path, merges_path):
    vocab = tok_mod.Vocabulary.load(vocab_path)
    merges = tok_mod.load_merges(merges_path) if merges_path else None
    return vocab, merges


def _spec_from_cfg(cfg) -> ControlSpec:
    return ControlSpec(
        length_bin=cfg["length_bin"] if cfg["length_bin"] >= 0 else None,
        entities=list(cfg["entity"]) or None,
        source_style=cfg["style"] if cfg["style"] >= 0 else None,
        remainder_boundary=cfg["boundary"] if cfg["boundary"] >= 0 else None)


# ---------------------------------------------------------------------------
# preprocess


PREPROCESS_DEFAULTS = {
    "corpus": "", "outdir": "", "num_merges": 0, "min_count": 0,
    "n_bins": 10, "truncate": 400, "entity_policy": "", "use_style": False,
    "remainder": False, "no_length": False, "dev_fraction": 0.1,
    "num_entities": 100, "num_sources": 2, "seed": 0,
}


def cmd_preprocess(cfg) -> int:
    _require(cfg, "corpus", "outdir")
    rng = np.random.default_rng(cfg["seed"])
    os.makedirs(cfg["outdir"], exist_ok=True)
    records = _anonymized_truncated(corpus_mod.load_corpus(cfg["corpus"]),
                                    cfg["truncate"])

    merges = None
    if cfg["num_merges"] > 0:
        bpe = tok_mod.BpeTokenizer(num_merges=cfg["num_merges"],
                                   num_entities=cfg["num_entities"],
                                   num_sources=cfg["num_sources"])
        lines = [" ".join(s) for rec in records
                 for s in rec.article_sentences + rec.summary_sentences]
        bpe.fit(lines)
        vocab, merges = bpe.vocab_, bpe.merges_
        records = _tokenize_records(records, bpe)
        tok_mod.save_merges(merges, os.path.join(cfg["outdir"], "merges.txt"))
    else:
        counts: dict[str, int] = {}
        for rec in records:
            for s in rec.article_sentences + rec.summary_sentences:
                for tok in s:
                    counts[tok] = counts.get(tok, 0) + 1
        vocab = tok_mod.build_word_vocab(counts, cfg["min_count"],
                                         cfg["num_entities"],
                                         cfg["num_sources"])
    vocab.save(os.path.join(cfg["outdir"], "vocab.txt"))

    binner = None
    if not cfg["no_length"]:
        binner = LengthBinner(n_bins=cfg["n_bins"]).fit(
            [len(r.summary_tokens()) for r in records])
        binner.save(os.path.join(cfg["outdir"], "bins.txt"))

    examples = []
    for rec in records:
        spec = ControlSpec(
            length_bin=(binner.assign(len(rec.summary_tokens()))
                        if binner else None),
            entities=(corpus_mod.select_training_entities(
                rec, cfg["entity_policy"], rng=rng) or None)
            if cfg["entity_policy"] else None,
            source_style=rec.source if cfg["use_style"] else None)
        prefix = compose_control_prefix(spec, vocab)
        tokens, _ = build_source(prefix, rec.article_tokens())
        tgt = vocab.encode(rec.summary_tokens()) + [vocab.eos_id]
        examples.append((rec.id, vocab.encode(tokens), tgt))
        if cfg["remainder"]:
            alignment = align_summary(rec.article_sentences,
                                      rec.summary_sentences)
            for j, ex in enumerate(make_remainder_examples(rec, alignment)):
                read = [t for s in ex.read_sentences for t in s]
                rest = [t for s in ex.remainder_sentences for t in s]
                rem_summary = [t for s in ex.remainder_summary_sentences
                               for t in s]
                rspec = ControlSpec(
                    length_bin=(binner.assign(len(rem_summary))
                                if binner else None),
                    source_style=rec.source if cfg["use_style"] else None)
                rtokens, _ = build_remainder_source(
                    compose_control_prefix(rspec, vocab), read, rest)
                examples.append((f"{rec.id}#r{j}", vocab.encode(rtokens),
                                 vocab.encode(rem_summary) + [vocab.eos_id]))

    order = rng.permutation(len(examples))
    n_dev = int(len(examples) * cfg["dev_fraction"])
    dev_idx = set(int(i) for i in order[:n_dev])
    meta = {
        "remainder": bool(cfg["remainder"]),
        "length_control": not cfg["no_length"],
        "num_merges": cfg["num_merges"],
        "vocab_size": len(vocab),
        "boundary_token_id": vocab.id(tok_mod.READ_BOUNDARY),
        "bos_id": vocab.bos_id,
        "eos_id": vocab.eos_id,
    }
    corpus_mod.write_dataset(
        os.path.join(cfg["outdir"], "train.bin"),
        [ex for i, ex in enumerate(examples) if i not in dev_idx], meta)
    corpus_mod.write_dataset(
        os.path.join(cfg["outdir"], "dev.bin"),
        [ex for i, ex in enumerate(examples) if i in dev_idx], meta)
    print(f"wrote {len(examples) - n_dev} train / {n_dev} dev examples "
          f"to {cfg['outdir']}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# train


TRAIN_DEFAULTS = {
    "data": "", "checkpoint_dir": "", "profile": "custom",
    "encoder_layers": 4, "decoder_layers": 4, "kernel_width": 3,
    "hidden_size": 64, "embed_size": 48, "dropout": 0.1,
    "max_positions": 512, "lr": 0.2, "momentum": 0.99, "clip_norm": 0.1,
    "max_tokens": 2000, "max_epochs": 30, "log": "", "seed": 0,
}


def _dataset_examples(path, meta):
    examples, file_meta = corpus_mod.read_dataset(path)
    meta.update(file_meta)
    out = []
    boundary = file_meta.get("boundary_token_id", -1)
    for _, src, tgt in examples:
        sets = corpus_mod.position_sets_for(src, boundary)
        out.append((np.asarray(src, dtype=np.int64),
                    np.asarray(sets, dtype=np.int64) if max(sets, default=0)
                    else None,
                    np.asarray(tgt, dtype=np.int64)))
    return out


def cmd_train(cfg) -> int:
    _require(cfg, "data", "checkpoint_dir")
    meta: dict = {}
    train_examples = _dataset_examples(
        os.path.join(cfg["data"], "train.bin"), meta)
    dev_path = os.path.join(cfg["data"], "dev.bin")
    dev_examples = _dataset_examples(dev_path, meta) \
        if os.path.exists(dev_path) else []
    vocab = tok_mod.Vocabulary.load(os.path.join(cfg["data"], "vocab.txt"))

    if cfg["profile"] == "cnn_dailymail":
        config = ModelConfig.cnn_dailymail(len(vocab), bos_id=vocab.bos_id)
    elif cfg["profile"] == "duc":
        config = ModelConfig.duc(len(vocab), bos_id=vocab.bos_id)
    elif cfg["profile"] == "custom":
        config = ModelConfig(
            vocab_size=len(vocab), encoder_layers=cfg["encoder_layers"],
            decoder_layers=cfg["decoder_layers"],
            kernel_width=cfg["kernel_width"], hidden_size=cfg["hidden_size"],
            embed_size=cfg["embed_size"], dropout_rate=cfg["dropout"],
            max_positions=cfg["max_positions"], bos_id=vocab.bos_id)
    else:
        raise CliError(f"unknown profile {cfg['profile']!r}")
    if meta.get("remainder"):
        config.position_sets = "read_remainder"

    os.makedirs(cfg["checkpoint_dir"], exist_ok=True)
    model = ConvSeq2Seq(config, seed=cfg["seed"])
    trainer = training_mod.Trainer(
        model, train_examples, dev_examples, lr=cfg["lr"],
        momentum=cfg["momentum"], clip_norm=cfg["clip_norm"],
        max_tokens_per_batch=cfg["max_tokens"], max_epochs=cfg["max_epochs"],
        seed=cfg["seed"], checkpoint_dir=cfg["checkpoint_dir"],
        log_path=cfg["log"] or None)
    history = trainer.train()
    for entry in history:
        print(f"{entry['epoch']}\t{entry['train_nll']:.6f}"
              f"\t{entry['val_ppl']:.6f}\t{entry['lr']:.8g}")
    return 0


# ---------------------------------------------------------------------------
# summarize


SUMMARIZE_DEFAULTS = {
    "checkpoint": "", "vocab": "", "merges": "", "corpus": "", "out": "",
    "length_bin": -1, "entity": [], "style": -1, "boundary": -1,
    "beam": 5, "min_len": 1, "max_len": 60, "no_trigram_block": False,
    "entity_mode": "", "remainder_method": "", "length_sweep": False,
    "curve_out": "", "truncate": 400, "seed": 0,
}


def cmd_summarize(cfg) -> int:
    _require(cfg, "checkpoint", "vocab", "corpus", "out")
    vocab, merges = _load_vocab_and_merges(cfg["vocab"], cfg["merges"])
    model = ConvSeq2Seq.load(cfg["checkpoint"])
    records = _anonymized_truncated(corpus_mod.load_corpus(cfg["corpus"]),
                                    cfg["truncate"])
    if merges is not None:
        bpe = tok_mod.BpeTokenizer()
        bpe.merges_, bpe.vocab_ = merges, vocab
        records = _tokenize_records(records, bpe)
    constraints = decoding_mod.DecodeConstraints(
        beam_size=cfg["beam"], min_len=cfg["min_len"], max_len=cfg["max_len"],
        block_trigrams=not cfg["no_trigram_block"])

    rows = []
    curve_totals: dict[int, list] = {}
    for rec in records:
        if cfg["length_sweep"]:
            for b in range(10):
                spec = ControlSpec(length_bin=b)
                out = decoding_mod.decode_record(model, rec, vocab, spec,
                                                 constraints)
                rows.append(_decode_row(rec, spec, out))
                curve_totals.setdefault(b, []).append(
                    len(out.text.split()))
        elif cfg["remainder_method"]:
            if cfg["boundary"] < 0:
                raise CliError("--boundary is required with a remainder method")
            out = decoding_mod.remainder_inference(
                model, rec, cfg["boundary"], cfg["remainder_method"], vocab,
                constraints,
                length_bin=cfg["length_bin"] if cfg["length_bin"] >= 0
                else None)
            spec = ControlSpec(length_bin=cfg["length_bin"]
                               if cfg["length_bin"] >= 0 else None,
                               remainder_boundary=cfg["boundary"])
            rows.append(_decode_row(rec, spec, out,
                                    method=cfg["remainder_method"]))
        elif cfg["entity_mode"]:
            spec, out = decoding_mod.fixed_control_inference(
                model, rec, vocab, constraints,
                length_bin=cfg["length_bin"] if cfg["length_bin"] >= 0
                else None,
                source_style=cfg["style"] if cfg["style"] >= 0 else None,
                entity_mode=cfg["entity_mode"], seed=cfg["seed"])
            rows.append(_decode_row(rec, spec, out))
        else:
            spec = _spec_from_cfg(cfg)
            out = decoding_mod.decode_record(model, rec, vocab, spec,
                                             constraints)
            rows.append(_decode_row(rec, spec, out))

    decoding_mod.write_decodes(cfg["out"], rows)
    if cfg["length_sweep"]:
        curve_path = cfg["curve_out"] or cfg["out"] + ".curve.tsv"
        with open(curve_path, "w", encoding="utf-8") as f:
            for b in sorted(curve_totals):
                mean = sum(curve_totals[b]) / len(curve_totals[b])
                f.write(f"{b}\t{mean:.4f}\n")
        print(f"wrote length curve to {curve_path}", file=sys.stderr)
    print(f"wrote {len(rows)} decodes to {cfg['out']}", file=sys.stderr)
    return 0


def _decode_row(rec: ArticleRecord, spec: ControlSpec, out, method=None):
    words = deanonymize([out.output_tokens], rec.entity_mentions)[0] \
        if rec.entity_mentions else out.output_tokens
    row = {
        "id": rec.id,
        "control": {
            "length_bin": spec.length_bin,
            "entities": spec.entities,
            "source_style": spec.source_style,
            "remainder_boundary": spec.remainder_boundary,
        },
        "token_ids": list(out.output_ids),
        "tokens": list(out.output_tokens),
        "text": tok_mod.detokenize(words),
        "score": out.score,
        "flagged": out.flagged,
    }
    if method:
        row["method"] = method
    return row


# ---------------------------------------------------------------------------
# evaluate


EVALUATE_DEFAULTS = {
    "decodes": "", "corpus": "", "out": "", "byte_limits": [],
}


def cmd_evaluate(cfg) -> int:
    _require(cfg, "decodes", "corpus", "out")
    decode_rows = decoding_mod.read_decodes(cfg["decodes"])
    refs = {}
    for rec in corpus_mod.load_corpus(cfg["corpus"]):
        art, summ, _ = anonymize(rec.article_sentences, rec.summary_sentences,
                                 rec.entity_mentions)
        refs[rec.id] = [t for s in summ for t in s]
    missing = [row["id"] for row in decode_rows
               if row["id"].split("#")[0] not in refs]
    if missing:
        raise CliError(f"decodes without references: {missing[:5]}")
    pairs = [(row["tokens"], refs[row["id"].split("#")[0]])
             for row in decode_rows]
    scores = metrics_mod.corpus_eval([c for c, _ in pairs],
                                     [r for _, r in pairs])
    report = [("rouge1_f1", scores["rouge1_f1"], scores["count"]),
              ("rouge2_f1", scores["rouge2_f1"], scores["count"]),
              ("rougeL_f1", scores["rougeL_f1"], scores["count"])]
    for limit in cfg["byte_limits"]:
        limit = int(limit)
        for kind in (1, 2, "L"):
            vals = [metrics_mod.rouge_recall_truncated(
                " ".join(c), " ".join(r), limit, kind) for c, r in pairs]
            report.append((f"rouge{kind}_recall@{limit}b",
                           sum(vals) / len(vals), len(vals)))
    metrics_mod.write_report(cfg["out"], report)
    for name, value, count in report:
        print(f"{name}\t{value:.6f}\t{count}")
    return 0


# ---------------------------------------------------------------------------
# align


ALIGN_DEFAULTS = {"corpus": "", "out": ""}


def cmd_align(cfg) -> int:
    _require(cfg, "corpus", "out")
    records = corpus_mod.load_corpus(cfg["corpus"])
    with open(cfg["out"], "w", encoding="utf-8") as f:
        for rec in records:
            alignment = align_summary(rec.article_sentences,
                                      rec.summary_sentences)
            boundaries = [ex.boundary
                          for ex in make_remainder_examples(rec, alignment)]
            f.write(json.dumps({"id": rec.id, "alignment": alignment,
                                "boundaries": boundaries},
                               sort_keys=True) + "\n")
    print(f"aligned {len(records)} records", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# synth


SYNTH_DEFAULTS = {"task": "", "size": 100, "seed": 0, "out": ""}


def cmd_synth(cfg) -> int:
    _require(cfg, "task", "out")
    if cfg["task"] not in datasets_mod.GENERATORS:
        raise CliError(f"unknown task {cfg['task']!r}; choose from "
                       f"{sorted(datasets_mod.GENERATORS)}")
    if cfg["size"] <= 0:
        raise CliError("size must be positive")
    records = datasets_mod.GENERATORS[cfg["task"]](cfg["size"], cfg["seed"])
    corpus_mod.save_corpus(records, cfg["out"])
    print(f"wrote {len(records)} {cfg['task']} records to {cfg['out']}",
          file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# argument wiring


COMMANDS = {
    "preprocess": (cmd_preprocess, PREPROCESS_DEFAULTS),
    "train": (cmd_train, TRAIN_DEFAULTS),
    "summarize": (cmd_summarize, SUMMARIZE_DEFAULTS),
    "evaluate": (cmd_evaluate, EVALUATE_DEFAULTS),
    "align": (cmd_align, ALIGN_DEFAULTS),
    "synth": (cmd_synth, SYNTH_DEFAULTS),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctrlsum",
        description="controllable summarization pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for command, (_, defaults) in COMMANDS.items():
        p = sub.add_parser(command, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="flat key = value settings file")
        for key, default in defaults.items():
            flag = "--" + key.replace("_", "-")
            if isinstance(default, bool):
                p.add_argument(flag, action="store_true")
            elif isinstance(default, list):
                p.add_argument(flag, action="append")
            elif isinstance(default, int):
                p.add_argument(flag, type=int)
            elif isinstance(default, float):
                p.add_argument(flag, type=float)
            else:
                p.add_argument(flag)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    func, defaults = COMMANDS[args.command]
    flag_values = {k: v for k, v in vars(args).items() if k != "command"}
    try:
        cfg = resolve_config(args.command, defaults, flag_values)
        return func(cfg)
    except (CliError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
