"""Token-level ROUGE, BLEU and Distinct scores.

Scores are computed on whitespace tokens after lowercasing, with no
stemming, so they are internally consistent but not comparable with the
official ROUGE/BLEU scripts.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

BLEU_SMOOTHING = "add-one for n >= 2 (numerator and denominator)"


def _norm(tokens) -> list[str]:
    if isinstance(tokens, str):
        tokens = tokens.split()
    return [str(t).lower() for t in tokens]


@dataclass
class EvalPair:
    """A hypothesis and its references.

    Each side may be a string or a token list; ``references`` is a list of
    references, or a single string.
    """
    hypothesis: list
    references: list

    def __post_init__(self):
        self.hypothesis = _norm(self.hypothesis)
        refs = self.references
        if isinstance(refs, str):
            refs = [refs]
        if not refs:
            raise ValueError("an evaluation pair needs at least one reference")
        self.references = [_norm(r) for r in refs]


def ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _f1(overlap: int, hyp_total: int, ref_total: int) -> float:
    if overlap == 0 or hyp_total == 0 or ref_total == 0:
        return 0.0
    p = overlap / hyp_total
    r = overlap / ref_total
    return 2 * p * r / (p + r)


def rouge_n(pair: EvalPair, n: int) -> float:
    """Clipped n-gram overlap F1; best over references.

    A non-empty hypothesis identical to a reference scores 1.0 even when it
    is too short to contain any n-gram.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    hyp = ngrams(pair.hypothesis, n)
    best = 0.0
    for ref in pair.references:
        if pair.hypothesis and pair.hypothesis == ref:
            return 1.0
        rc = ngrams(ref, n)
        overlap = sum((hyp & rc).values())
        best = max(best, _f1(overlap, sum(hyp.values()), sum(rc.values())))
    return best


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(pair: EvalPair) -> float:
    """LCS-based F1 (beta = 1); best over references."""
    best = 0.0
    for ref in pair.references:
        best = max(best, _f1(lcs_length(pair.hypothesis, ref), len(pair.hypothesis), len(ref)))
    return best


def bleu(pairs: Sequence[EvalPair], max_n: int = 4) -> float:
    """Corpus BLEU with brevity penalty; see :data:`BLEU_SMOOTHING`."""
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for pair in pairs:
        hyp = pair.hypothesis
        hyp_len += len(hyp)
        ref_len += min((len(r) for r in pair.references), key=lambda L: (abs(L - len(hyp)), L))
        for n in range(1, max_n + 1):
            hc = ngrams(hyp, n)
            max_ref: Counter = Counter()
            for r in pair.references:
                max_ref |= ngrams(r, n)
            matches[n - 1] += sum((hc & max_ref).values())
            totals[n - 1] += sum(hc.values())
    if hyp_len == 0:
        return 0.0
    log_p = 0.0
    for n in range(max_n):
        num, den = matches[n], totals[n]
        if n >= 1:
            num, den = num + 1, den + 1
        if num == 0 or den == 0:
            return 0.0
        log_p += math.log(num / den) / max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_p)


def distinct_n(hypotheses: Iterable, n: int) -> float:
    """Unique n-grams over total n-grams across all hypotheses (0.0 when there are none)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    seen: set = set()
    total = 0
    for h in hypotheses:
        grams = ngrams(_norm(h), n)
        seen.update(grams)
        total += sum(grams.values())
    return len(seen) / total if total else 0.0


METRICS = ("rouge-1", "rouge-2", "rouge-l", "bleu-4", "distinct-1", "distinct-2")


@dataclass
class ScoreReport:
    corpus: dict = field(default_factory=dict)
    per_pair: list = field(default_factory=list)
    count: int = 0

    def to_text(self) -> str:
        lines = [f"# bleu smoothing: {BLEU_SMOOTHING}", "metric\tvalue\tcount"]
        lines += [f"{name}\t{value:.6f}\t{self.count}" for name, value in self.corpus.items()]
        return "\n".join(lines) + "\n"

    def per_pair_tsv(self) -> str:
        keys = [k for k in self.corpus if k.startswith("rouge")]
        lines = ["index\t" + "\t".join(keys)]
        for i, row in enumerate(self.per_pair):
            lines.append(f"{i}\t" + "\t".join(f"{row[k]:.6f}" for k in keys))
        return "\n".join(lines) + "\n"


def evaluate(pairs: Sequence[EvalPair], metrics: Sequence[str] = METRICS) -> ScoreReport:
    """Corpus scores; ROUGE is the mean of per-pair values."""
    unknown = set(metrics) - set(METRICS) - {f"bleu-{k}" for k in range(1, 5)}
    if unknown:
        raise ValueError(f"unknown metrics: {sorted(unknown)}")
    report = ScoreReport(count=len(pairs))
    per_pair = [dict() for _ in pairs]
    for name in metrics:
        if name.startswith("rouge"):
            kind = name.split("-")[1]
            vals = [rouge_l(p) if kind == "l" else rouge_n(p, int(kind)) for p in pairs]
            for row, v in zip(per_pair, vals):
                row[name] = v
            report.corpus[name] = sum(vals) / len(vals) if vals else 0.0
        elif name.startswith("bleu"):
            report.corpus[name] = bleu(pairs, int(name.split("-")[1]))
        else:
            report.corpus[name] = distinct_n([p.hypothesis for p in pairs], int(name.split("-")[1]))
    report.per_pair = per_pair
    return report
