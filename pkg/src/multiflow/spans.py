"""Statistical span vocabulary and greedy span segmentation.

Bigrams and trigrams are scored with a one-sample t-test against the
hypothesis that their words co-occur independently; the best-scoring ones
together with every unigram form the span vocabulary.  Target sequences are
then cut into spans of at most three tokens by greedy longest match.
"""

from __future__ import annotations

import hashlib
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

Ngram = tuple[int, ...]

DEFAULT_BIGRAM_TOP = 2000
DEFAULT_TRIGRAM_TOP = 500


@dataclass
class NgramCounts:
    counts: dict[int, Counter] = field(default_factory=lambda: {1: Counter(), 2: Counter(), 3: Counter()})
    corpus_hash: str = ""

    def total(self, n: int) -> int:
        return sum(self.counts[n].values())

    def __getitem__(self, n: int) -> Counter:
        return self.counts[n]


def _tokens(doc) -> tuple[int, ...]:
    return tuple(getattr(doc, "tokens", doc))


def count_ngrams(corpus: Iterable, n_max: int = 3) -> NgramCounts:
    """Sliding-window n-gram counts, never crossing document boundaries."""
    result = NgramCounts(counts={n: Counter() for n in range(1, n_max + 1)})
    docs = [_tokens(d) for d in corpus]
    if not docs:
        raise ValueError("count_ngrams: empty corpus")
    for toks in docs:
        for n in range(1, n_max + 1):
            c = result.counts[n]
            for i in range(len(toks) - n + 1):
                c[toks[i:i + n]] += 1
    h = hashlib.sha256()
    for toks in sorted(docs):
        h.update(repr(toks).encode())
    result.corpus_hash = h.hexdigest()[:16]
    return result


def t_statistic(w: Ngram, counts: NgramCounts) -> float:
    """t = (p(w) - prod p(w_i)) / sqrt(p(w)(1 - p(w)) / N_n).

    ``p(w)`` is relative to the number of n-grams of the same order and the
    unigram probabilities to the number of unigrams.  A degenerate
    ``p(w) == 1`` (zero variance) scores ``+inf``.
    """
    w = tuple(w)
    n = len(w)
    count = counts.counts.get(n, Counter()).get(w, 0)
    if count == 0:
        raise KeyError(f"n-gram {w} was never observed")
    N = counts.total(n)
    N1 = counts.total(1)
    p = count / N
    # integer product, one rounding: equal statistics stay bit-equal under any token order
    p_indep = math.prod(counts.counts[1][(tok,)] for tok in w) / N1 ** n
    var = p * (1.0 - p)
    if var <= 0.0:
        return math.inf
    return (p - p_indep) / math.sqrt(var / N)


@dataclass
class SpanVocab:
    unigrams: frozenset
    bigrams: frozenset
    trigrams: frozenset
    bigram_top: int
    trigram_top: int
    scores: dict = field(default_factory=dict)
    corpus_hash: str = ""

    def __contains__(self, ngram) -> bool:
        ngram = tuple(ngram)
        n = len(ngram)
        if n == 1:
            return ngram in self.unigrams
        if n == 2:
            return ngram in self.bigrams
        if n == 3:
            return ngram in self.trigrams
        return False

    def members(self) -> list[Ngram]:
        return sorted(self.unigrams) + self.ranked(2) + self.ranked(3)

    def ranked(self, n: int) -> list[Ngram]:
        pool = self.bigrams if n == 2 else self.trigrams
        return sorted(pool, key=lambda g: (-self.scores[g], g))

    def save(self, path) -> None:
        lines = ["# multiflow span vocabulary v1",
                 f"bigram_top={self.bigram_top}",
                 f"trigram_top={self.trigram_top}",
                 f"corpus_hash={self.corpus_hash}"]
        for g in self.members():
            score = self.scores.get(g)
            lines.append(" ".join([str(len(g)), *map(str, g), "-" if score is None else repr(score)]))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SpanVocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith("# multiflow span vocabulary"):
            raise ValueError(f"{path}: not a span vocabulary file")
        header = dict(l.split("=", 1) for l in lines[1:4])
        sets = {1: set(), 2: set(), 3: set()}
        scores = {}
        for line in lines[4:]:
            parts = line.split()
            n = int(parts[0])
            g = tuple(int(x) for x in parts[1:1 + n])
            sets[n].add(g)
            if parts[1 + n] != "-":
                scores[g] = float(parts[1 + n])
        return cls(frozenset(sets[1]), frozenset(sets[2]), frozenset(sets[3]),
                   int(header["bigram_top"]), int(header["trigram_top"]), scores,
                   header.get("corpus_hash", ""))


def build_span_vocab(counts: NgramCounts, bigram_top: int = DEFAULT_BIGRAM_TOP,
                     trigram_top: int = DEFAULT_TRIGRAM_TOP) -> SpanVocab:
    """All unigrams plus the top bigrams/trigrams ordered by (-t, id tuple)."""
    if bigram_top < 0 or trigram_top < 0:
        raise ValueError("selection limits must be non-negative")
    scores = {}
    selected = {}
    for n, top in ((2, bigram_top), (3, trigram_top)):
        scored = [(t_statistic(g, counts), g) for g in counts.counts.get(n, {})]
        scored.sort(key=lambda sg: (-sg[0], sg[1]))
        keep = scored[:top]
        selected[n] = frozenset(g for _, g in keep)
        scores.update({g: s for s, g in keep})
    return SpanVocab(unigrams=frozenset(counts.counts[1]), bigrams=selected[2], trigrams=selected[3],
                     bigram_top=bigram_top, trigram_top=trigram_top, scores=scores,
                     corpus_hash=counts.corpus_hash)


def segment_spans(tokens: Sequence[int], vocab: SpanVocab) -> list[int]:
    """Greedy left-to-right longest match; returns span start indices.

    At each cursor the trigram is tried first, then the bigram; a single
    token is always accepted, whether or not it was seen in training.
    """
    tokens = tuple(tokens)
    if not tokens:
        raise ValueError("segment_spans: empty sequence")
    starts = []
    c = 0
    n = len(tokens)
    while c < n:
        starts.append(c)
        if c + 3 <= n and tokens[c:c + 3] in vocab.trigrams:
            c += 3
        elif c + 2 <= n and tokens[c:c + 2] in vocab.bigrams:
            c += 2
        else:
            c += 1
    return starts


def span_starts_per_token(boundaries: Sequence[int], length: int) -> list[int]:
    """Map each target index j to the start b_i of the span containing it."""
    if not boundaries or boundaries[0] != 0:
        raise ValueError("span boundaries must start at 0")
    out = []
    bounds = list(boundaries) + [length]
    for k in range(len(boundaries)):
        lo, hi = bounds[k], bounds[k + 1]
        if hi <= lo or hi > length:
            raise ValueError(f"span boundaries {list(boundaries)} invalid for length {length}")
        out.extend([lo] * (hi - lo))
    return out
