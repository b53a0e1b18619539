"""Data ingestion and preprocessing.

Everything between a raw (article, summary) pair and a model-ready token
stream lives here: entity anonymization, equal-frequency length binning,
control-prefix composition, summary-to-article alignment, remainder
example construction and article truncation. Records are newline-delimited
JSON objects; all functions are pure over immutable records.
"""

from __future__ import annotations

import json
import logging
import math
import re
import struct
from dataclasses import dataclass, field
from collections.abc import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .metrics import rouge_l
from .tokenization import READ_BOUNDARY, LENGTH_MARKERS, Vocabulary, source_marker

logger = logging.getLogger(__name__)

ENTITY_TOKEN_RE = re.compile(r"@entity\d+$")

TokenSentences = list[list[str]]


@dataclass
class ArticleRecord:
    """One training unit: tokenized article and summary sentences, a
    source-style label and the mention->entity-token map."""

    id: str
    source: int
    article_sentences: TokenSentences
    summary_sentences: TokenSentences
    entity_mentions: dict[str, str] = field(default_factory=dict)

    def article_tokens(self) -> list[str]:
        return [t for s in self.article_sentences for t in s]

    def summary_tokens(self) -> list[str]:
        return [t for s in self.summary_sentences for t in s]

    def to_json(self) -> str:
        obj = {
            "id": self.id,
            "source": self.source,
            "article": [" ".join(s) for s in self.article_sentences],
            "summary": [" ".join(s) for s in self.summary_sentences],
            "entities": self.entity_mentions,
        }
        return json.dumps(obj, sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "ArticleRecord":
        obj = json.loads(line)
        return cls(
            id=str(obj["id"]),
            source=int(obj.get("source", 0)),
            article_sentences=[s.split() for s in obj["article"]],
            summary_sentences=[s.split() for s in obj["summary"]],
            entity_mentions=dict(obj.get("entities", {})),
        )


def load_corpus(path) -> list[ArticleRecord]:
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(ArticleRecord.from_json(line))
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{path}: malformed record at line {lineno}: {exc}")
    return records


def save_corpus(records: Iterable[ArticleRecord], path):
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(rec.to_json() + "\n")


# ---------------------------------------------------------------------------
# entity anonymization


def anonymize(article_sentences: TokenSentences, summary_sentences: TokenSentences,
              entity_mentions: dict[str, str]):
    """Replace every occurrence of each mention with its entity token, in
    both article and summary. Longest mention wins at each position, then
    leftmost. Returns the anonymized sides plus the map used, so the
    replacement can be inverted.
    """
    for mention in entity_mentions:
        if not mention.strip():
            raise ValueError("empty entity mention")
    by_tokens = [(tuple(m.split()), tok) for m, tok in entity_mentions.items()]
    by_tokens.sort(key=lambda mt: -len(mt[0]))  # longest-match-first

    def replace(sentence: Sequence[str]) -> list[str]:
        out = []
        i = 0
        while i < len(sentence):
            for mention, tok in by_tokens:
                if tuple(sentence[i:i + len(mention)]) == mention:
                    out.append(tok)
                    i += len(mention)
                    break
            else:
                out.append(sentence[i])
                i += 1
        return out

    art = [replace(s) for s in article_sentences]
    summ = [replace(s) for s in summary_sentences]
    return art, summ, dict(entity_mentions)


def deanonymize(sentences: TokenSentences, entity_mentions: dict[str, str]) -> TokenSentences:
    """Invert :func:`anonymize` by substituting each entity token with its
    mention tokens (first-defined mention wins when the map is not 1:1)."""
    inverse: dict[str, list[str]] = {}
    for mention, tok in entity_mentions.items():
        inverse.setdefault(tok, mention.split())
    out = []
    for sentence in sentences:
        cur: list[str] = []
        for t in sentence:
            cur.extend(inverse.get(t, [t]))
        out.append(cur)
    return out


def detect_capitalized_entities(article_sentences: TokenSentences) -> dict[str, str]:
    """Fallback mention detector for raw text: maximal runs of capitalized
    tokens become mentions, numbered by first appearance. Real corpora ship
    their own entity maps; this exists so raw text is not a dead end."""
    mentions: list[str] = []
    seen = set()
    for sentence in article_sentences:
        run: list[str] = []
        for tok in sentence + [""]:
            if tok and tok[0].isupper():
                run.append(tok)
                continue
            if run:
                mention = " ".join(run)
                if mention not in seen:
                    seen.add(mention)
                    mentions.append(mention)
                run = []
    mentions.sort(key=lambda m: -len(m.split()))  # longer spans claim ids first
    return {m: f"@entity{k}" for k, m in enumerate(mentions)}


# ---------------------------------------------------------------------------
# length binning


class LengthBinner(BaseEstimator, TransformerMixin):
    """Equal-frequency quantizer for summary lengths.

    fit() places ``n_bins - 1`` boundaries at empirical quantiles of the
    training lengths; transform() maps a length to the number of boundaries
    strictly below it, so each boundary value itself falls in the lower bin.
    Heavy ties collapse duplicate boundaries (fewer effective bins) with a
    logged warning.
    """

    def __init__(self, n_bins: int = 10):
        self.n_bins = n_bins

    def fit(self, lengths: Sequence[int], y=None):
        if self.n_bins < 1:
            raise ValueError("n_bins must be >= 1")
        lengths = sorted(int(x) for x in lengths)
        if not lengths:
            raise ValueError("cannot fit length bins on an empty set")
        n = len(lengths)
        raw = [lengths[math.ceil(i * n / self.n_bins) - 1]
               for i in range(1, self.n_bins)]
        boundaries = []
        for b in raw:
            if not boundaries or b > boundaries[-1]:
                boundaries.append(b)
        if len(boundaries) < self.n_bins - 1:
            logger.warning(
                "length ties collapsed %d requested bins to %d effective bins",
                self.n_bins, len(boundaries) + 1)
        self.boundaries_ = boundaries
        return self

    def transform(self, lengths) -> np.ndarray:
        self._check_fitted()
        arr = np.asarray(lengths, dtype=np.int64)
        return np.searchsorted(np.asarray(self.boundaries_), arr, side="left")

    def assign(self, length: int) -> int:
        """Bin id for one length: the count of boundaries strictly below it."""
        self._check_fitted()
        return int(np.searchsorted(np.asarray(self.boundaries_), length, side="left"))

    @property
    def effective_bins_(self) -> int:
        self._check_fitted()
        return len(self.boundaries_) + 1

    def save(self, path):
        """One boundary per line."""
        self._check_fitted()
        with open(path, "w", encoding="utf-8") as f:
            for b in self.boundaries_:
                f.write(f"{b}\n")

    @classmethod
    def load(cls, path) -> "LengthBinner":
        with open(path, encoding="utf-8") as f:
            boundaries = [int(line) for line in f if line.strip()]
        binner = cls(n_bins=len(boundaries) + 1)
        binner.boundaries_ = boundaries
        return binner

    def _check_fitted(self):
        if not hasattr(self, "boundaries_"):
            raise NotFittedError("LengthBinner is not fitted; call fit first")


# ---------------------------------------------------------------------------
# control prefixes


@dataclass
class ControlSpec:
    """A user's control request: any subset of length bin, entities of
    interest, source style and a read/remainder boundary."""

    length_bin: int | None = None
    entities: list[str] | None = None
    source_style: int | None = None
    remainder_boundary: int | None = None


def compose_control_prefix(spec: ControlSpec, vocab: Vocabulary) -> list[str]:
    """The marker tokens prepended to the encoder input, in fixed order:
    length marker, entity markers, source marker. An empty spec yields an
    empty prefix."""
    prefix: list[str] = []
    if spec.length_bin is not None:
        if not 0 <= spec.length_bin < len(LENGTH_MARKERS):
            raise ValueError(f"length bin {spec.length_bin} outside 0..9")
        prefix.append(LENGTH_MARKERS[spec.length_bin])
    if spec.entities:
        for tok in spec.entities:
            if not ENTITY_TOKEN_RE.match(tok) or tok not in vocab:
                raise ValueError(f"unknown entity token {tok!r}")
            prefix.append(tok)
    if spec.source_style is not None:
        marker = source_marker(spec.source_style)
        if marker not in vocab:
            raise ValueError(f"unknown source style {spec.source_style}")
        prefix.append(marker)
    return prefix


def entities_in(sentences: TokenSentences) -> list[str]:
    """Entity tokens occurring in the sentences, ordered by first appearance."""
    seen = []
    for sentence in sentences:
        for tok in sentence:
            if ENTITY_TOKEN_RE.match(tok) and tok not in seen:
                seen.append(tok)
    return seen


def select_training_entities(record: ArticleRecord, policy: str,
                             baseline_output: Sequence[str] | None = None,
                             rng: np.random.Generator | None = None) -> list[str]:
    """Entity markers to prepend for one training (or inference) example.

    reference_all: every entity in the reference summary.
    reference_minus_baseline: reference entities the supplied baseline
        decode failed to produce (the informative-request policy).
    lead3_random: one uniformly sampled entity from the first three
        article sentences.
    An empty candidate set yields an empty list.
    """
    if policy == "reference_all":
        return entities_in(record.summary_sentences)
    if policy == "reference_minus_baseline":
        if baseline_output is None:
            raise ValueError("reference_minus_baseline needs a baseline decode")
        produced = set(baseline_output)
        return [e for e in entities_in(record.summary_sentences)
                if e not in produced]
    if policy == "lead3_random":
        if rng is None:
            raise ValueError("lead3_random needs a seeded generator")
        candidates = entities_in(record.article_sentences[:3])
        if not candidates:
            return []
        return [candidates[rng.integers(len(candidates))]]
    raise ValueError(f"unknown entity policy {policy!r}")


# ---------------------------------------------------------------------------
# alignment and remainder construction


def align_summary(article_sentences: TokenSentences,
                  summary_sentences: TokenSentences) -> list[int]:
    """For each summary sentence, the index of the article sentence with
    the highest sentence-level ROUGE-L F1; ties go to the lowest index."""
    if not article_sentences or not summary_sentences:
        raise ValueError("alignment needs nonempty article and summary")
    alignment = []
    for summ in summary_sentences:
        best_idx, best_f1 = 0, -1.0
        for idx, art in enumerate(article_sentences):
            f1 = rouge_l(summ, art).f1
            if f1 > best_f1:
                best_idx, best_f1 = idx, f1
        alignment.append(best_idx)
    return alignment


@dataclass
class RemainderExample:
    """An article split into a read prefix and an unread remainder, with
    the summary sentences that belong to the remainder."""

    read_sentences: TokenSentences
    remainder_sentences: TokenSentences
    remainder_summary_sentences: TokenSentences

    @property
    def boundary(self) -> int:
        return len(self.read_sentences)


def make_remainder_examples(record: ArticleRecord,
                            alignment: Sequence[int]) -> list[RemainderExample]:
    """One example per consecutive alignment pair at least 2 sentences
    apart: the boundary sits at the floor midpoint, and summary sentences
    aligned strictly before it are dropped."""
    examples = []
    for a, b in zip(alignment, alignment[1:]):
        if b - a < 2:
            continue
        boundary = (a + b) // 2
        kept = [s for s, pos in zip(record.summary_sentences, alignment)
                if pos >= boundary]
        examples.append(RemainderExample(
            read_sentences=[list(s) for s in record.article_sentences[:boundary]],
            remainder_sentences=[list(s) for s in record.article_sentences[boundary:]],
            remainder_summary_sentences=kept,
        ))
    return examples


# ---------------------------------------------------------------------------
# truncation and source composition


def truncate_article(tokens: Sequence[str], limit: int = 400) -> list[str]:
    """First ``limit`` article tokens. The control prefix is composed
    separately and never counts against this budget."""
    if limit <= 0:
        raise ValueError("truncation limit must be positive")
    return list(tokens[:limit])


def truncate_sentences(sentences: TokenSentences, limit: int = 400) -> TokenSentences:
    """Sentence-structured variant of :func:`truncate_article`; a sentence
    cut by the budget keeps its surviving prefix."""
    if limit <= 0:
        raise ValueError("truncation limit must be positive")
    out = []
    used = 0
    for sentence in sentences:
        if used >= limit:
            break
        take = sentence[:limit - used]
        out.append(list(take))
        used += len(take)
    return out


def build_source(prefix: Sequence[str], article_tokens: Sequence[str]):
    """Encoder input for the standard task: control prefix then article.
    All tokens use position set 0."""
    tokens = list(prefix) + list(article_tokens)
    return tokens, [0] * len(tokens)


def build_remainder_source(prefix: Sequence[str], read_tokens: Sequence[str],
                           remainder_tokens: Sequence[str]):
    """Encoder input for the read-and-remainder task: prefix and read part
    in position set 0, then the boundary marker, then the remainder in
    position set 1 (indices restart after the marker)."""
    tokens = list(prefix) + list(read_tokens) + [READ_BOUNDARY] + list(remainder_tokens)
    sets = [0] * (len(prefix) + len(read_tokens) + 1) + [1] * len(remainder_tokens)
    return tokens, sets


def position_sets_for(src_ids: Sequence[int], boundary_id: int) -> list[int]:
    """Recover the per-token position-set assignment from a token id
    stream: everything up to and including the boundary marker is set 0,
    everything after restarts in set 1."""
    sets = []
    current = 0
    for tok in src_ids:
        sets.append(current)
        if tok == boundary_id:
            current = 1
    return sets


# ---------------------------------------------------------------------------
# tokenized dataset artifact

_DATASET_MAGIC = "ctrlsum-dataset v1"


def write_dataset(path, examples: Sequence[tuple[str, Sequence[int], Sequence[int]]],
                  meta: dict):
    """Binary tokenized dataset: a header line with JSON metadata, then per
    example an "id n_src n_tgt" line followed by the source and target ids
    as little-endian int32, row-major."""
    with open(path, "wb") as f:
        header = f"{_DATASET_MAGIC} {json.dumps(meta, sort_keys=True)}\n"
        f.write(header.encode("utf-8"))
        for ex_id, src, tgt in examples:
            if " " in ex_id or "\n" in ex_id:
                raise ValueError(f"example id may not contain spaces: {ex_id!r}")
            f.write(f"{ex_id} {len(src)} {len(tgt)}\n".encode("utf-8"))
            f.write(struct.pack(f"<{len(src)}i", *src))
            f.write(struct.pack(f"<{len(tgt)}i", *tgt))


def read_dataset(path):
    """Inverse of :func:`write_dataset`; returns (examples, meta)."""
    with open(path, "rb") as f:
        header = f.readline().decode("utf-8").rstrip("\n")
        if not header.startswith(_DATASET_MAGIC + " "):
            raise ValueError(f"{path}: not a {_DATASET_MAGIC} file")
        meta = json.loads(header[len(_DATASET_MAGIC) + 1:])
        examples = []
        while True:
            line = f.readline()
            if not line:
                break
            ex_id, n_src, n_tgt = line.decode("utf-8").split()
            n_src, n_tgt = int(n_src), int(n_tgt)
            src = list(struct.unpack(f"<{n_src}i", f.read(4 * n_src)))
            tgt = list(struct.unpack(f"<{n_tgt}i", f.read(4 * n_tgt)))
            examples.append((ex_id, src, tgt))
    return examples, meta
