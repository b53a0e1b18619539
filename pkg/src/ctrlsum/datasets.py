"""Synthetic corpora for desk-scale control experiments.

Each generator builds a deterministic corpus of :class:`ArticleRecord`
whose optimal summarizer depends on a control marker: output length for
``length_copy``, the requested entity for ``entity_facts``, a suffix
template for ``style_pair`` and the read/remainder split for
``remainder_tags``. Alongside the generators live the small assembly
helpers that turn records into model-ready id triples.
"""

from __future__ import annotations

import re

import numpy as np

from .corpus import (
    ArticleRecord,
    ControlSpec,
    align_summary,
    build_remainder_source,
    build_source,
    compose_control_prefix,
    entities_in,
    make_remainder_examples,
    select_training_entities,
)
from .tokenization import Vocabulary, entity_marker, reserved_tokens

STYLE_SUFFIXES = {0: ["--", "brief"], 1: ["--", "full", "report"]}


# ---------------------------------------------------------------------------
# generators


def length_copy(size: int, seed: int = 0, *, n_bins: int = 10,
                article_len: int = 24, vocab_words: int = 12):
    """Random-token articles; the summary copies the first ``2 + 2*bin``
    tokens, with bins cycling so every bin population is equal."""
    if size <= 0:
        raise ValueError("size must be positive")
    rng = np.random.default_rng(seed)
    words = [f"w{j}" for j in range(vocab_words)]
    records = []
    for i in range(size):
        m = 2 + 2 * (i % n_bins)
        article = [words[j] for j in rng.integers(len(words), size=article_len)]
        records.append(ArticleRecord(
            id=f"lencopy-{i:05d}", source=0,
            article_sentences=[article],
            summary_sentences=[article[:m]]))
    return records


def entity_facts(size: int, seed: int = 0, *, k: int = 5,
                 entity_pool: int = 20, fact_pool: int = 12):
    """Articles of ``k`` entity-fact sentences; the summary restates the
    fact of one (hidden) entity of interest. Without a marker the best
    predictor of which fact to emit is chance 1/k."""
    if size <= 0:
        raise ValueError("size must be positive")
    rng = np.random.default_rng(seed)
    records = []
    for i in range(size):
        ents = rng.choice(entity_pool, size=k, replace=False)
        sentences = []
        for e in ents:
            fact = f"fact{rng.integers(fact_pool)}"
            sentences.append([entity_marker(int(e)), "has", fact, "."])
        requested = int(rng.integers(k))
        records.append(ArticleRecord(
            id=f"entfacts-{i:05d}", source=0,
            article_sentences=sentences,
            summary_sentences=[list(sentences[requested])]))
    return records


def style_pair(size: int, seed: int = 0, *, content_len: int = 3,
               vocab_words: int = 10, article_len: int = 10):
    """Each article appears under both source styles with the same content
    summary but a style-specific closing template, so only the style
    marker disambiguates which suffix to produce."""
    if size <= 0:
        raise ValueError("size must be positive")
    rng = np.random.default_rng(seed)
    words = [f"w{j}" for j in range(vocab_words)]
    records = []
    for i in range((size + 1) // 2):
        article = [words[j] for j in rng.integers(len(words), size=article_len)]
        content = article[:content_len]
        for style in (0, 1):
            records.append(ArticleRecord(
                id=f"style-{i:05d}-s{style}", source=style,
                article_sentences=[list(article)],
                summary_sentences=[content + STYLE_SUFFIXES[style]]))
    return records[:size]


def remainder_tags(size: int, seed: int = 0, *, paragraphs: int = 3,
                   sents_per_paragraph: int = 3, tag_pool: int = 15,
                   filler_pool: int = 10):
    """Multi-paragraph articles where each paragraph opens with a unique
    tag sentence and the summary copies exactly those openers. Consecutive
    summary sentences therefore align ``sents_per_paragraph`` apart,
    guaranteeing remainder splits exist."""
    if size <= 0:
        raise ValueError("size must be positive")
    if sents_per_paragraph < 2:
        raise ValueError("need at least 2 sentences per paragraph for gaps")
    rng = np.random.default_rng(seed)
    records = []
    for i in range(size):
        tags = rng.choice(tag_pool, size=paragraphs, replace=False)
        article, summary = [], []
        for t in tags:
            opener = [f"tag{int(t)}", "opens", "."]
            article.append(opener)
            summary.append(list(opener))
            for _ in range(sents_per_paragraph - 1):
                article.append([f"filler{rng.integers(filler_pool)}", "more", "."])
        records.append(ArticleRecord(
            id=f"remtags-{i:05d}", source=0,
            article_sentences=article, summary_sentences=summary))
    return records


GENERATORS = {
    "length_copy": length_copy,
    "entity_facts": entity_facts,
    "style_pair": style_pair,
    "remainder_tags": remainder_tags,
}


# ---------------------------------------------------------------------------
# vocab and example assembly

_ENTITY_IDX = re.compile(r"@entity(\d+)$")


def build_task_vocab(records, *, num_entities: int | None = None,
                     num_sources: int | None = None) -> Vocabulary:
    """Word-level vocabulary over a synthetic corpus: the reserved control
    tokens (sized to cover what the records use) followed by the word
    types in sorted order."""
    words = set()
    max_entity, max_source = -1, 0
    for rec in records:
        max_source = max(max_source, rec.source)
        for sent in rec.article_sentences + rec.summary_sentences:
            for tok in sent:
                m = _ENTITY_IDX.match(tok)
                if m:
                    max_entity = max(max_entity, int(m.group(1)))
                else:
                    words.add(tok)
    if num_entities is None:
        num_entities = max_entity + 1
    if num_sources is None:
        num_sources = max_source + 1
    return Vocabulary(reserved_tokens(num_entities=num_entities,
                                      num_sources=num_sources) + sorted(words))


def example_for(record: ArticleRecord, spec: ControlSpec, vocab: Vocabulary):
    """(source ids, position-set ids or None, target ids) for one record
    under one control request; the target ends with the end token."""
    prefix = compose_control_prefix(spec, vocab)
    tokens, sets = build_source(prefix, record.article_tokens())
    src = np.asarray(vocab.encode(tokens), dtype=np.int64)
    tgt = np.asarray(vocab.encode(record.summary_tokens()) + [vocab.eos_id],
                     dtype=np.int64)
    return src, None, tgt


def training_examples(records, vocab: Vocabulary, *, binner=None,
                      entity_policy: str | None = None,
                      use_style: bool = False, seed: int = 0):
    """Standard (single position set) training triples with the control
    prefix composed per record: length marker from the fitted binner,
    entity markers per policy, style marker from the record source."""
    rng = np.random.default_rng(seed)
    out = []
    for rec in records:
        entities = None
        if entity_policy is not None:
            entities = select_training_entities(rec, entity_policy, rng=rng) or None
        spec = ControlSpec(
            length_bin=(binner.assign(len(rec.summary_tokens()))
                        if binner is not None else None),
            entities=entities,
            source_style=rec.source if use_style else None)
        out.append(example_for(rec, spec, vocab))
    return out


def remainder_training_examples(records, vocab: Vocabulary, *,
                                include_full: bool = True):
    """Mixture for the read/remainder task: the plain full-summary example
    per record plus one example per remainder split, whose source carries
    the boundary marker and dual position sets."""
    out = []
    for rec in records:
        if include_full:
            out.append(example_for(rec, ControlSpec(), vocab))
        alignment = align_summary(rec.article_sentences, rec.summary_sentences)
        for ex in make_remainder_examples(rec, alignment):
            read = [t for s in ex.read_sentences for t in s]
            rest = [t for s in ex.remainder_sentences for t in s]
            tokens, sets = build_remainder_source([], read, rest)
            src = np.asarray(vocab.encode(tokens), dtype=np.int64)
            tgt_tokens = [t for s in ex.remainder_summary_sentences for t in s]
            tgt = np.asarray(vocab.encode(tgt_tokens) + [vocab.eos_id],
                             dtype=np.int64)
            out.append((src, np.asarray(sets, dtype=np.int64), tgt))
    return out


def remainder_eval_triples(records):
    """(record, boundary, remainder-reference tokens) triples for every
    remainder split of every record."""
    out = []
    for rec in records:
        alignment = align_summary(rec.article_sentences, rec.summary_sentences)
        for ex in make_remainder_examples(rec, alignment):
            ref = [t for s in ex.remainder_summary_sentences for t in s]
            out.append((rec, ex.boundary, ref))
    return out


def requested_entity(record: ArticleRecord) -> str:
    """The entity of interest for an entity_facts record (the one whose
    fact the reference summary restates)."""
    ents = entities_in(record.summary_sentences)
    if not ents:
        raise ValueError(f"record {record.id} has no summary entity")
    return ents[0]


def style_template_correct(tokens, style: int) -> bool:
    """Whether a decoded token sequence ends with the given style's
    closing template."""
    suffix = STYLE_SUFFIXES[style]
    return list(tokens[-len(suffix):]) == suffix
