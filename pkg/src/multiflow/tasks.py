"""Synthetic paired tasks for desk-scale experiments.

Every generator works on raw token ids drawn from the non-reserved range
``[NUM_RESERVED, vocab_size)`` and returns ``(source, target)`` pairs;
callers append the end symbol when assembling examples.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .text import NUM_RESERVED

Pair = tuple[list[int], list[int]]


def _payload(rng: np.random.Generator, vocab_size: int, min_len: int, max_len: int) -> list[int]:
    length = int(rng.integers(min_len, max_len + 1))
    return rng.integers(NUM_RESERVED, vocab_size, size=length).tolist()


def copy_pairs(n: int, vocab_size: int = 64, min_len: int = 1, max_len: int = 16, seed: int = 0) -> list[Pair]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        s = _payload(rng, vocab_size, min_len, max_len)
        out.append((s, list(s)))
    return out


def reverse_pairs(n: int, vocab_size: int = 64, min_len: int = 1, max_len: int = 16, seed: int = 0) -> list[Pair]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        s = _payload(rng, vocab_size, min_len, max_len)
        out.append((s, s[::-1]))
    return out


def salient_ids(vocab_size: int) -> range:
    """The upper quarter of the regular ids counts as "salient"."""
    low = vocab_size - max(1, (vocab_size - NUM_RESERVED) // 4)
    return range(low, vocab_size)


def headline_pairs(n: int, vocab_size: int = 64, k: int = 4, min_len: int = 8, max_len: int = 24,
                   seed: int = 0) -> list[Pair]:
    """Toy summarization: the target is the first ``k`` salient tokens of the source.

    Sources are resampled until they hold at least one salient token, so
    targets are never empty.
    """
    rng = np.random.default_rng(seed)
    salient = salient_ids(vocab_size)
    out = []
    while len(out) < n:
        s = _payload(rng, vocab_size, min_len, max_len)
        head = [t for t in s if t in salient][:k]
        if head:
            out.append((s, head))
    return out


def chain_successors(vocab_size: int, table_seed: int = 0) -> dict[int, int]:
    """A fixed random successor for every regular id."""
    ids = np.arange(NUM_RESERVED, vocab_size)
    succ = np.random.default_rng(table_seed).permutation(ids)
    return {int(a): int(b) for a, b in zip(ids, succ)}


def continuation_pairs(n: int, vocab_size: int = 64, min_len: int = 4, max_len: int = 12, target_len: int = 8,
                       stay: float = 0.9, table_seed: int = 0, seed: int = 0) -> list[Pair]:
    """Toy continuation: the target is the next ``target_len`` steps of a Markov chain.

    Each step follows the fixed successor table with probability ``stay`` and
    jumps to a uniform id otherwise, so every target token depends mostly on
    the one before it.  The table depends on ``table_seed`` only, so pairs
    drawn with different ``seed`` values share one chain.
    """
    nxt = chain_successors(vocab_size, table_seed)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        total = int(rng.integers(min_len, max_len + 1)) + target_len
        seq = [int(rng.integers(NUM_RESERVED, vocab_size))]
        while len(seq) < total:
            seq.append(nxt[seq[-1]] if rng.random() < stay else int(rng.integers(NUM_RESERVED, vocab_size)))
        out.append((seq[:-target_len], seq[-target_len:]))
    return out


TASKS: dict[str, Callable[..., list[Pair]]] = {
    "copy": copy_pairs,
    "reverse": reverse_pairs,
    "headline": headline_pairs,
    "continuation": continuation_pairs,
}
