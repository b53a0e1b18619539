"""Byte-pair encoding and vocabulary construction.

BPE merges are learned greedily over word character sequences; applying
them is deterministic and reversible: non-final subwords carry the ``@@``
continuation suffix, so detokenization is a pure string operation.
Control tokens (``@entityK``, ``@lenK``, ``@genSourceK``, ``@readBoundary``)
live in a reserved vocabulary region, are never produced by merges, and
pass through tokenization unsplit.
"""

from __future__ import annotations

from collections import Counter
from collections.abc import Iterable

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

CONTINUATION = "@@"

PAD = "<pad>"
BOS = "<s>"
EOS = "</s>"
UNK = "<unk>"
READ_BOUNDARY = "@readBoundary"

LENGTH_MARKERS = tuple(f"@len{i}" for i in range(10))


def entity_marker(k: int) -> str:
    return f"@entity{k}"


def source_marker(k: int) -> str:
    return f"@genSource{k}"


def reserved_tokens(num_entities: int = 100, num_sources: int = 2) -> list[str]:
    """The reserved region, in id order: specials, length bins, entity
    markers, source-style markers, read boundary."""
    toks = [PAD, BOS, EOS, UNK]
    toks += list(LENGTH_MARKERS)
    toks += [entity_marker(k) for k in range(num_entities)]
    toks += [source_marker(k) for k in range(num_sources)]
    toks.append(READ_BOUNDARY)
    return toks


class Vocabulary:
    """Dense token<->id bijection with the reserved control-token region
    at the front, so control ids are stable across retrainings of BPE."""

    def __init__(self, tokens: Iterable[str], counts: dict[str, int] | None = None):
        self._tokens = list(tokens)
        self._ids = {}
        for i, tok in enumerate(self._tokens):
            if tok in self._ids:
                raise ValueError(f"duplicate vocabulary token {tok!r}")
            self._ids[tok] = i
        self.counts = dict(counts or {})

    def __len__(self):
        return len(self._tokens)

    def __contains__(self, token):
        return token in self._ids

    @property
    def tokens(self) -> list[str]:
        return list(self._tokens)

    def id(self, token: str) -> int:
        return self._ids.get(token, self._ids[UNK])

    def token(self, idx: int) -> str:
        return self._tokens[idx]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self._tokens[i] for i in ids]

    @property
    def pad_id(self) -> int:
        return self._ids[PAD]

    @property
    def bos_id(self) -> int:
        return self._ids[BOS]

    @property
    def eos_id(self) -> int:
        return self._ids[EOS]

    @property
    def unk_id(self) -> int:
        return self._ids[UNK]

    def save(self, path):
        """One "token count" per line; id = line number."""
        with open(path, "w", encoding="utf-8") as f:
            for tok in self._tokens:
                f.write(f"{tok} {self.counts.get(tok, 0)}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens, counts = [], {}
        with open(path, encoding="utf-8") as f:
            for line in f:
                tok, count = line.rstrip("\n").rsplit(" ", 1)
                tokens.append(tok)
                counts[tok] = int(count)
        return cls(tokens, counts)


def build_word_vocab(word_counts: dict[str, int], min_count: int = 20,
                     num_entities: int = 100, num_sources: int = 2) -> Vocabulary:
    """Word-level vocabulary for the non-BPE configuration.

    A token is kept only when its count exceeds ``min_count`` (strictly);
    everything below maps to the unknown token.
    """
    reserved = reserved_tokens(num_entities, num_sources)
    reserved_set = set(reserved)
    kept = [(tok, c) for tok, c in word_counts.items()
            if c > min_count and tok not in reserved_set]
    kept.sort(key=lambda tc: (-tc[1], tc[0]))
    tokens = reserved + [tok for tok, _ in kept]
    return Vocabulary(tokens, dict(kept))


def learn_bpe(word_counts: dict[str, int], num_merges: int,
              protected: Iterable[str] = ()) -> list[tuple[str, str]]:
    """Learn an ordered merge list by greedy most-frequent-pair counting.

    Symbol pairs never cross word boundaries. Equal-frequency ties break
    lexicographically on (left, right) so learning is deterministic.
    Words in ``protected`` (control tokens) are excluded from learning.
    """
    if num_merges < 0:
        raise ValueError("num_merges must be >= 0")
    protected = set(protected)
    words = {}
    for word, count in word_counts.items():
        if not word or word in protected:
            continue
        words[tuple(word)] = words.get(tuple(word), 0) + count

    merges: list[tuple[str, str]] = []
    for _ in range(num_merges):
        pairs: Counter = Counter()
        for sym, count in words.items():
            for a, b in zip(sym, sym[1:]):
                if a + b not in protected:  # never merge into a control token
                    pairs[(a, b)] += count
        if not pairs:
            break
        best = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        merges.append(best)
        merged = {}
        for sym, count in words.items():
            new = _merge_symbols(sym, best)
            merged[new] = merged.get(new, 0) + count
        words = merged
    return merges


def _merge_symbols(symbols: tuple[str, ...], pair: tuple[str, str]) -> tuple[str, ...]:
    a, b = pair
    out = []
    i = 0
    n = len(symbols)
    while i < n:
        if i < n - 1 and symbols[i] == a and symbols[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


def apply_bpe(merges: list[tuple[str, str]], word: str,
              reserved: Iterable[str] = ()) -> list[str]:
    """Segment one word by applying the merges in learned order.

    Reserved tokens pass through unchanged. Non-final subwords carry the
    continuation suffix so the split is reversible.
    """
    if not word:
        raise ValueError("cannot segment an empty word")
    if any(ch.isspace() for ch in word):
        raise ValueError(f"word contains whitespace: {word!r}")
    if word in set(reserved):
        return [word]
    symbols = tuple(word)
    for pair in merges:
        if len(symbols) == 1:
            break
        symbols = _merge_symbols(symbols, pair)
    return [s + CONTINUATION for s in symbols[:-1]] + [symbols[-1]]


def detokenize(subwords: Iterable[str]) -> str:
    """Invert apply_bpe over a whitespace-joined stream of subwords."""
    words = []
    pending = ""
    for sub in subwords:
        if sub.endswith(CONTINUATION) and len(sub) > len(CONTINUATION):
            pending += sub[:-len(CONTINUATION)]
        else:
            words.append(pending + sub)
            pending = ""
    if pending:
        words.append(pending)
    return " ".join(words)


def save_merges(merges: list[tuple[str, str]], path):
    with open(path, "w", encoding="utf-8") as f:
        for left, right in merges:
            f.write(f"{left} {right}\n")


def load_merges(path) -> list[tuple[str, str]]:
    merges = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            left, right = line.rstrip("\n").split(" ")
            merges.append((left, right))
    return merges


class BpeTokenizer(BaseEstimator, TransformerMixin):
    """Subword tokenizer with the fit/transform estimator interface.

    fit() learns the merge list from a corpus of whitespace-tokenized
    lines; transform() maps each line to its subword token list. Control
    tokens survive unsplit and are never emitted as merge products.

    Parameters
    ----------
    num_merges : number of merge operations to learn (30000 reproduces the
        full-scale configuration; desk-scale corpora want far fewer).
    num_entities, num_sources : sizes of the reserved marker ranges.
    """

    def __init__(self, num_merges: int = 30000, num_entities: int = 100,
                 num_sources: int = 2):
        self.num_merges = num_merges
        self.num_entities = num_entities
        self.num_sources = num_sources

    def fit(self, lines: Iterable[str], y=None):
        reserved = reserved_tokens(self.num_entities, self.num_sources)
        counts: Counter = Counter()
        for line in lines:
            counts.update(line.split())
        self.merges_ = learn_bpe(counts, self.num_merges, protected=reserved)
        subword_counts: Counter = Counter()
        for word, count in counts.items():
            for sub in apply_bpe(self.merges_, word, reserved):
                subword_counts[sub] += count
        kept = sorted(subword_counts.items(), key=lambda tc: (-tc[1], tc[0]))
        kept = [(tok, c) for tok, c in kept if tok not in set(reserved)]
        self.vocab_ = Vocabulary(reserved + [tok for tok, _ in kept], dict(kept))
        return self

    def transform(self, lines: Iterable[str]) -> list[list[str]]:
        self._check_fitted()
        reserved = set(reserved_tokens(self.num_entities, self.num_sources))
        return [self.tokenize_words(line.split(), reserved) for line in lines]

    def tokenize_words(self, words: Iterable[str], _reserved=None) -> list[str]:
        """Segment a pre-split token sequence into subwords."""
        self._check_fitted()
        reserved = _reserved if _reserved is not None else set(
            reserved_tokens(self.num_entities, self.num_sources))
        out = []
        for word in words:
            out.extend(apply_bpe(self.merges_, word, reserved))
        return out

    def inverse_transform(self, token_lists: Iterable[Iterable[str]]) -> list[str]:
        return [detokenize(toks) for toks in token_lists]

    def _check_fitted(self):
        if not hasattr(self, "merges_"):
            raise NotFittedError("BpeTokenizer is not fitted; call fit first")
