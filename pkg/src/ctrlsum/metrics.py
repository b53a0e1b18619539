"""ROUGE scoring and corpus-level evaluation.

Scoring is case-insensitive (both sides lowercased) with no stemming, and
ROUGE-L uses the whole-summary longest common subsequence. These choices
keep every fixture deterministic; they are close to, but not byte-equal
with, the historical perl package.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from collections.abc import Sequence


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, match: float, cand_total: float, ref_total: float) -> "RougeScore":
        p = match / cand_total if cand_total > 0 else 0.0
        r = match / ref_total if ref_total > 0 else 0.0
        f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
        return cls(p, r, f1)


def _lower(tokens: Sequence[str]) -> list[str]:
    return [t.lower() for t in tokens]


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate: Sequence[str], reference: Sequence[str], n: int) -> RougeScore:
    """Clipped n-gram overlap: each n-gram counts at most as often as it
    appears in the reference."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    cand = _ngrams(_lower(candidate), n)
    ref = _ngrams(_lower(reference), n)
    match = sum(min(c, ref[g]) for g, c in cand.items())
    return RougeScore.from_counts(match, sum(cand.values()), sum(ref.values()))


def lcs_length(a: Sequence, b: Sequence) -> int:
    """Longest common subsequence length by O(n*m) dynamic programming."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            if x == y:
                cur.append(prev[j - 1] + 1)
            else:
                cur.append(max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[str], reference: Sequence[str]) -> RougeScore:
    cand = _lower(candidate)
    ref = _lower(reference)
    match = lcs_length(cand, ref)
    return RougeScore.from_counts(match, len(cand), len(ref))


def truncate_bytes(text: str, byte_limit: int) -> str:
    """First whole tokens of ``text`` fitting in ``byte_limit`` UTF-8 bytes;
    a token that would cross the limit is dropped entirely."""
    if byte_limit <= 0:
        raise ValueError("byte_limit must be positive")
    out: list[str] = []
    used = 0
    for token in text.split():
        cost = len(token.encode("utf-8")) + (1 if out else 0)
        if used + cost > byte_limit:
            break
        out.append(token)
        used += cost
    return " ".join(out)


def rouge_recall_truncated(candidate_text: str, reference_text: str,
                           byte_limit: int, kind) -> float:
    """Byte-truncated recall, the DUC-style evaluation mode.

    ``kind`` is an n-gram order (1, 2, ...) or ``"L"``.
    """
    cand = truncate_bytes(candidate_text, byte_limit).split()
    ref = reference_text.split()
    if kind == "L":
        return rouge_l(cand, ref).recall
    return rouge_n(cand, ref, int(kind)).recall


def lead3(article_sentences: Sequence[Sequence[str]]) -> list[list[str]]:
    """Extractive baseline: the first three article sentences, verbatim."""
    if not article_sentences:
        raise ValueError("article has no sentences")
    return [list(s) for s in article_sentences[:3]]


def entity_occurrence_rate(decodes: Sequence[tuple[Sequence[str], str]]) -> float:
    """Fraction of decodes whose token sequence contains the entity token
    that was requested for that decode."""
    if not decodes:
        raise ValueError("no decodes to score")
    hits = sum(1 for tokens, requested in decodes if requested in tokens)
    return hits / len(decodes)


def corpus_eval(decodes: Sequence[Sequence[str]],
                references: Sequence[Sequence[str]]) -> dict[str, float]:
    """Unweighted mean of per-document F1 for ROUGE-1/2/L."""
    if len(decodes) != len(references):
        raise ValueError(
            f"decode/reference count mismatch: {len(decodes)} vs {len(references)}")
    if not decodes:
        raise ValueError("empty evaluation set")
    n = len(decodes)
    r1 = r2 = rl = 0.0
    for cand, ref in zip(decodes, references):
        r1 += rouge_n(cand, ref, 1).f1
        r2 += rouge_n(cand, ref, 2).f1
        rl += rouge_l(cand, ref).f1
    return {"rouge1_f1": r1 / n, "rouge2_f1": r2 / n, "rougeL_f1": rl / n,
            "count": n}


def length_response_curve(model, records, vocab, binner, *, beam_size: int = 5,
                          max_len: int = 80,
                          block_trigrams: bool = True) -> list[float]:
    """Decode every record once per length marker and report the mean
    detokenized output length per bin (the length-control response curve).

    No tuned min/max window is applied; ``max_len`` is only a hard cap so
    decoding terminates.
    """
    from . import decoding  # local import; decoding depends on this module
    from .corpus import ControlSpec

    n_bins = len(binner.boundaries_) + 1
    means = []
    for b in range(n_bins):
        total = 0
        for rec in records:
            spec = ControlSpec(length_bin=b)
            out = decoding.decode_record(
                model, rec, vocab, spec,
                constraints=decoding.DecodeConstraints(
                    beam_size=beam_size, min_len=1, max_len=max_len,
                    block_trigrams=block_trigrams))
            total += len(out.text.split())
        means.append(total / len(records))
    return means


def write_report(path, rows: Sequence[tuple[str, float, int]]):
    """Tab-separated evaluation table: metric, value, count."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("metric\tvalue\tcount\n")
        for metric, value, count in rows:
            f.write(f"{metric}\t{value:.6f}\t{count}\n")
