"""Where does the word flow look?  Attention mass on source, clean and corrupted history.

For every word-flow [ATTN] query the last layer's attention weights
(averaged over heads) are split into four parts: source keys, unnoised
target keys, noised target keys, and the query's own slot.  The first three
therefore sum to one minus the self weight.  A target key counts as noised
when its input token differs from the clean target token.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import NoiseConfig, assemble_pair, collate, example_rng
from .model import MultiFlowModel
from .spans import SpanVocab

UNDEFINED = "n/a"


@dataclass
class AttentionRow:
    rate: float
    source: float
    unnoised: float
    noised: float | None        # None when no query could see a noised key
    self_weight: float
    queries: int
    examples: int
    unnoised_per_key: float
    noised_per_key: float | None

    def cells(self) -> list[str]:
        def fmt(v):
            return UNDEFINED if v is None else f"{v:.6f}"
        return [f"{self.rate:g}", fmt(self.source), fmt(self.unnoised), fmt(self.noised), fmt(self.self_weight),
                str(self.queries), fmt(self.unnoised_per_key), fmt(self.noised_per_key)]


HEADER = ["rate", "source", "unnoised", "noised", "self", "queries", "unnoised_per_key", "noised_per_key"]


def format_report(rows: Sequence[AttentionRow]) -> str:
    lines = ["\t".join(HEADER)] + ["\t".join(r.cells()) for r in rows]
    return "\n".join(lines) + "\n"


def attention_split(probs: np.ndarray, src_len: np.ndarray, tgt_len: np.ndarray, noised: np.ndarray) -> dict:
    """Split word-flow attention ``(B, heads, M, N + M)`` into per-query masses.

    Returns arrays over all valid queries: ``source``, ``unnoised``,
    ``noised``, ``self``, plus the number of visible unnoised/noised keys
    per query.
    """
    w = probs.mean(axis=1)
    B, M, width = w.shape
    N = width - M
    out = {k: [] for k in ("source", "unnoised", "noised", "self", "n_unnoised", "n_noised")}
    for b in range(B):
        n, m = int(src_len[b]), int(tgt_len[b])
        flags = noised[b, :m]
        for i in range(m):
            row = w[b, i]
            hist = row[n:n + i]
            f = flags[:i]
            out["source"].append(row[:n].sum())
            out["unnoised"].append(hist[~f].sum())
            out["noised"].append(hist[f].sum())
            out["self"].append(row[N + i])
            out["n_unnoised"].append(int((~f).sum()))
            out["n_noised"].append(int(f.sum()))
    return {k: np.asarray(v) for k, v in out.items()}


def analyze_attention(model: MultiFlowModel, pairs: Sequence[tuple[Sequence[int], Sequence[int]]],
                      rates: Sequence[float], span_vocab: SpanVocab, num_examples: int = 1000,
                      seed: int = 0, batch_size: int = 64) -> list[AttentionRow]:
    """Average word-flow attention split per noise rate.

    ``num_examples`` pairs are drawn (cycling through ``pairs``) and their
    targets noised at each rate with recorded positions.  Mass columns are
    averaged over all queries; the ``noised`` mass is ``None`` when no
    query sees a noised key.  The ``*_per_key`` columns divide each query's
    mass by its number of visible keys of that kind and average over the
    queries that see at least one.
    """
    if not pairs:
        raise ValueError("no pairs to analyze")
    rows = []
    for rate in rates:
        noise = NoiseConfig(rate=rate, vocab_size=model.config.vocab_size)
        parts = []
        for lo in range(0, num_examples, batch_size):
            examples = []
            for k in range(lo, min(num_examples, lo + batch_size)):
                s, t = pairs[k % len(pairs)]
                examples.append(assemble_pair(s, t, span_vocab, noise, example_rng(seed, k)))
            batch = collate(examples)
            with T.no_grad():
                _, run = model.forward_multiflow(batch, flows=("word",), record_attention=True)
            parts.append(attention_split(run["attention"], batch.src_len, batch.tgt_len, batch.noised))
        split = {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}
        sees_noised = split["n_noised"] > 0
        sees_clean = split["n_unnoised"] > 0
        rows.append(AttentionRow(
            rate=float(rate),
            source=float(split["source"].mean()),
            unnoised=float(split["unnoised"].mean()),
            noised=float(split["noised"].mean()) if sees_noised.any() else None,
            self_weight=float(split["self"].mean()),
            queries=len(split["self"]),
            examples=num_examples,
            unnoised_per_key=float((split["unnoised"][sees_clean] / split["n_unnoised"][sees_clean]).mean())
            if sees_clean.any() else None,
            noised_per_key=float((split["noised"][sees_noised] / split["n_noised"][sees_noised]).mean())
            if sees_noised.any() else None,
        ))
    return rows
