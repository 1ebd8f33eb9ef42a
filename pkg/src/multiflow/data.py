"""Training-example assembly: fragment sampling, target noising, batching."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .spans import SpanVocab, segment_spans, span_starts_per_token
from .text import EOS, MASK, NUM_RESERVED, PAD, _get_varint, _put_varint

SHORT_AND_LONG = ((1, 4, 0.4), (4, 32, 0.6))


@dataclass(frozen=True)
class FragmentSamplingConfig:
    gamma: float = 0.25
    distributions: tuple = SHORT_AND_LONG
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        probs = [d[2] for d in self.distributions]
        if not self.distributions or abs(sum(probs) - 1.0) > 1e-9:
            raise ValueError(f"distribution probabilities must sum to 1, got {probs}")
        for low, high, p in self.distributions:
            if low < 1 or high < low or p < 0:
                raise ValueError(f"bad length distribution ({low}, {high}, {p})")


@dataclass(frozen=True)
class NoiseConfig:
    rate: float = 0.05
    vocab_size: int = 0
    seed: int = 0
    candidate_low: int = NUM_RESERVED

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"noise rate must lie in [0, 1], got {self.rate}")

    @property
    def candidates(self) -> range:
        return range(self.candidate_low, self.vocab_size)


@dataclass
class FragmentSample:
    s_prime: np.ndarray
    t_clean: np.ndarray
    fragment_spans: list  # (orig_start, length), sorted by start
    dist_index: int


@dataclass
class TrainingExample:
    s_prime: np.ndarray
    t_clean: np.ndarray
    t_noised: np.ndarray
    span_boundaries: list
    fragment_spans: list = field(default_factory=list)
    noised: np.ndarray | None = None
    loss_mask: np.ndarray | None = None
    dist_index: int = -1

    def __post_init__(self):
        self.s_prime = np.asarray(self.s_prime, dtype=np.int64)
        self.t_clean = np.asarray(self.t_clean, dtype=np.int64)
        self.t_noised = np.asarray(self.t_noised, dtype=np.int64)
        m = len(self.t_clean)
        if len(self.t_noised) != m:
            raise ValueError("clean and noised targets differ in length")
        if self.noised is None:
            self.noised = self.t_noised != self.t_clean
        if self.loss_mask is None:
            self.loss_mask = np.ones(m, dtype=bool)
        self.noised = np.asarray(self.noised, dtype=bool)
        self.loss_mask = np.asarray(self.loss_mask, dtype=bool)

    @property
    def src_len(self) -> int:
        return len(self.s_prime)

    @property
    def tgt_len(self) -> int:
        return len(self.t_clean)

    @property
    def a_w_len(self) -> int:
        return len(self.t_noised)

    @property
    def positions(self) -> np.ndarray:
        """Position ids of ``[S'; T']``."""
        return np.arange(self.src_len + self.tgt_len)

    @property
    def segments(self) -> np.ndarray:
        return np.r_[np.zeros(self.src_len, np.int64), np.ones(self.tgt_len, np.int64)]

    @property
    def attn_positions(self) -> np.ndarray:
        """Each [ATTN] slot shares the position id of the token it predicts."""
        return self.src_len + np.arange(self.tgt_len)

    @property
    def span_starts(self) -> list:
        return span_starts_per_token(self.span_boundaries, self.tgt_len)

    @property
    def num_tokens(self) -> int:
        return self.src_len + 3 * self.tgt_len


# ---------------------------------------------------------------------------
# fragment sampling


def _place(occupied: np.ndarray, length: int, rng: np.random.Generator, attempts: int = 100) -> int | None:
    n = len(occupied)
    for _ in range(attempts):
        start = int(rng.integers(0, n - length + 1))
        if not occupied[start:start + length].any():
            return start
    # rejection failed: draw uniformly from the exact feasible set
    free = np.r_[0, np.cumsum(~occupied)]
    starts = np.nonzero(free[length:] - free[:-length] == length)[0]
    if len(starts) == 0:
        return None
    return int(starts[rng.integers(0, len(starts))])


def sample_fragments(s: Sequence[int], config: FragmentSamplingConfig,
                     rng: np.random.Generator) -> FragmentSample:
    """Pick one length distribution, then carve fragments until the budget is spent.

    The budget is ``floor(gamma * |s|)`` tokens (at least one).  The last
    fragment is clipped to the remaining budget, so the total target length
    always equals the budget.
    """
    s = np.asarray(s, dtype=np.int64)
    n = len(s)
    if n < 2:
        raise ValueError("sample_fragments needs at least two tokens")
    probs = [d[2] for d in config.distributions]
    dist_index = int(rng.choice(len(probs), p=probs))
    low, high, _ = config.distributions[dist_index]
    budget = max(1, math.floor(config.gamma * n))
    occupied = np.zeros(n, dtype=bool)
    spans = []
    total = 0
    while total < budget:
        length = min(int(rng.integers(low, high + 1)), budget - total, n)
        start = None
        while length >= 1:
            start = _place(occupied, length, rng)
            if start is not None:
                break
            length -= 1
        if start is None:
            break
        occupied[start:start + length] = True
        spans.append((start, length))
        total += length
    spans.sort()
    t_clean = np.concatenate([s[a:a + l] for a, l in spans])
    return FragmentSample(s_prime=s[~occupied], t_clean=t_clean, fragment_spans=spans,
                          dist_index=dist_index)


def reconstruct_source(s_prime: Sequence[int], t_clean: Sequence[int], fragment_spans) -> list[int]:
    """Interleave the residual source with fragments at their original offsets."""
    total = len(s_prime) + len(t_clean)
    out = [None] * total
    k = 0
    for start, length in fragment_spans:
        out[start:start + length] = list(t_clean[k:k + length])
        k += length
    rest = iter(s_prime)
    return [next(rest) if v is None else v for v in out]


# ---------------------------------------------------------------------------
# corruption


def apply_noise(t: Sequence[int], config: NoiseConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Replace each position independently with probability ``rate``.

    Replacements are uniform over the candidate ids and may coincide with the
    original token.  Returns ``(t_noised, replaced)``.
    """
    t = np.asarray(t, dtype=np.int64)
    replaced = rng.random(len(t)) < config.rate
    out = t.copy()
    k = int(replaced.sum())
    if k:
        cands = config.candidates
        if len(cands) == 0:
            raise ValueError("noise: no candidate replacement ids")
        out[replaced] = rng.integers(cands.start, cands.stop, size=k)
    return out, replaced


def mask_targets(t: Sequence[int], prob: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Masked-LM style corruption: replace with [MASK]; returns (t_masked, masked)."""
    t = np.asarray(t, dtype=np.int64)
    masked = rng.random(len(t)) < prob
    out = t.copy()
    out[masked] = MASK
    return out, masked


# ---------------------------------------------------------------------------
# assembly


def assemble_example(s: Sequence[int], span_vocab: SpanVocab, frag_config: FragmentSamplingConfig,
                     noise_config: NoiseConfig, rng: np.random.Generator) -> TrainingExample:
    frag = sample_fragments(s, frag_config, rng)
    t_noised, replaced = apply_noise(frag.t_clean, noise_config, rng)
    boundaries = segment_spans(t_noised, span_vocab)
    return TrainingExample(s_prime=frag.s_prime, t_clean=frag.t_clean, t_noised=t_noised,
                           span_boundaries=boundaries, fragment_spans=frag.fragment_spans,
                           noised=replaced, dist_index=frag.dist_index)


def assemble_pair(source: Sequence[int], target: Sequence[int], span_vocab: SpanVocab,
                  noise_config: NoiseConfig, rng: np.random.Generator, mode: str = "noising",
                  mask_prob: float = 0.7, append_eos: bool = True) -> TrainingExample:
    """Paired (source, target) example for fine-tuning.

    ``noising`` corrupts the target input at the configured rate and scores
    every target position; ``masking`` replaces targets with [MASK] and scores
    only the masked positions.
    """
    t_clean = np.asarray(list(target) + ([EOS] if append_eos else []), dtype=np.int64)
    if len(t_clean) == 0:
        raise ValueError("empty target")
    if mode == "noising":
        t_noised, replaced = apply_noise(t_clean, noise_config, rng)
        loss_mask = np.ones(len(t_clean), dtype=bool)
    elif mode == "masking":
        t_noised, replaced = mask_targets(t_clean, mask_prob, rng)
        loss_mask = replaced.copy()
    else:
        raise ValueError(f"unknown fine-tuning mode {mode!r}")
    boundaries = segment_spans(t_noised, span_vocab)
    return TrainingExample(s_prime=np.asarray(source, dtype=np.int64), t_clean=t_clean, t_noised=t_noised,
                           span_boundaries=boundaries, noised=replaced, loss_mask=loss_mask)


def example_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream per (seed, keys...), e.g. (global seed, document id, step)."""
    return np.random.default_rng([int(seed), *map(int, keys)])


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    x_ids: np.ndarray        # (B, N) ids of [S'; T'] padded with [PAD]
    x_pos: np.ndarray
    x_seg: np.ndarray
    a_pos: np.ndarray        # (B, M) position of each [ATTN] slot
    src_len: np.ndarray      # (B,)
    tgt_len: np.ndarray      # (B,)
    span_start: np.ndarray   # (B, M) start of the span containing each target index
    targets: np.ndarray      # (B, M) clean target ids
    loss_mask: np.ndarray    # (B, M) bool
    noised: np.ndarray       # (B, M) bool: input token differs from the clean target
    examples: list

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def num_target_tokens(self) -> int:
        return int(self.loss_mask.sum())


def collate(examples: Sequence[TrainingExample]) -> Batch:
    if not examples:
        raise ValueError("cannot collate an empty list of examples")
    B = len(examples)
    N = max(e.src_len + e.tgt_len for e in examples)
    M = max(e.tgt_len for e in examples)
    x_ids = np.full((B, N), PAD, dtype=np.int64)
    x_pos = np.zeros((B, N), dtype=np.int64)
    x_seg = np.zeros((B, N), dtype=np.int64)
    a_pos = np.zeros((B, M), dtype=np.int64)
    span_start = np.zeros((B, M), dtype=np.int64)
    targets = np.full((B, M), PAD, dtype=np.int64)
    loss_mask = np.zeros((B, M), dtype=bool)
    noised = np.zeros((B, M), dtype=bool)
    for b, e in enumerate(examples):
        n, m = e.src_len, e.tgt_len
        x_ids[b, :n] = e.s_prime
        x_ids[b, n:n + m] = e.t_noised
        x_pos[b, :n + m] = e.positions
        x_seg[b, :n + m] = e.segments
        a_pos[b, :m] = e.attn_positions
        span_start[b, :m] = e.span_starts
        targets[b, :m] = e.t_clean
        loss_mask[b, :m] = e.loss_mask
        noised[b, :m] = e.t_noised != e.t_clean
    return Batch(x_ids, x_pos, x_seg, a_pos,
                 np.array([e.src_len for e in examples]), np.array([e.tgt_len for e in examples]),
                 span_start, targets, loss_mask, noised, list(examples))


def padded_cost(examples: Sequence[TrainingExample]) -> int:
    N = max(e.src_len + e.tgt_len for e in examples)
    M = max(e.tgt_len for e in examples)
    return len(examples) * (N + 2 * M)


def batch(examples: Iterable[TrainingExample], max_tokens: int) -> list[Batch]:
    """Greedy order-preserving packing.

    A batch's cost is its padded footprint: ``B * (N + 2M)`` where N is the
    longest ``[S'; T']`` and M the longest target (one slot each for the
    word and span [ATTN] sequences).
    """
    out = []
    current: list[TrainingExample] = []
    for e in examples:
        if padded_cost([e]) > max_tokens:
            raise ValueError(f"example with {padded_cost([e])} padded tokens exceeds max_tokens={max_tokens}")
        if current and padded_cost(current + [e]) > max_tokens:
            out.append(collate(current))
            current = []
        current.append(e)
    if current:
        out.append(collate(current))
    return out


# ---------------------------------------------------------------------------
# example cache: b"MFEX" + uint32 version + uint64 count, then per example a
# run of varint-prefixed integer arrays in a fixed field order.

_EX_MAGIC = b"MFEX"
_EX_VERSION = 1
_FIELDS = ("s_prime", "t_clean", "t_noised", "span_boundaries", "fragment_flat", "noised", "loss_mask")


def _example_arrays(e: TrainingExample) -> list:
    flat = [v for span in e.fragment_spans for v in span]
    return [e.s_prime, e.t_clean, e.t_noised, e.span_boundaries, flat,
            e.noised.astype(int), e.loss_mask.astype(int)]


def save_examples(path, examples: Iterable[TrainingExample]) -> int:
    body = bytearray()
    count = 0
    for e in examples:
        _put_varint(body, e.dist_index + 1)
        for arr in _example_arrays(e):
            arr = [int(v) for v in arr]
            _put_varint(body, len(arr))
            for v in arr:
                _put_varint(body, v)
        count += 1
    with open(path, "wb") as fh:
        fh.write(_EX_MAGIC + struct.pack("<IQ", _EX_VERSION, count))
        fh.write(body)
    return count


def load_examples(path) -> list[TrainingExample]:
    buf = Path(path).read_bytes()
    if buf[:4] != _EX_MAGIC:
        raise ValueError(f"{path}: not an example cache")
    version, count = struct.unpack_from("<IQ", buf, 4)
    if version != _EX_VERSION:
        raise ValueError(f"{path}: unsupported example cache version {version}")
    pos = 4 + 12
    out = []
    for _ in range(count):
        dist, pos = _get_varint(buf, pos)
        arrays = []
        for _ in _FIELDS:
            length, pos = _get_varint(buf, pos)
            vals = []
            for _ in range(length):
                v, pos = _get_varint(buf, pos)
                vals.append(v)
            arrays.append(vals)
        s_prime, t_clean, t_noised, bounds, flat, noised, loss_mask = arrays
        out.append(TrainingExample(s_prime=s_prime, t_clean=t_clean, t_noised=t_noised,
                                   span_boundaries=bounds,
                                   fragment_spans=[(flat[i], flat[i + 1]) for i in range(0, len(flat), 2)],
                                   noised=np.array(noised, dtype=bool), loss_mask=np.array(loss_mask, dtype=bool),
                                   dist_index=dist - 1))
    return out


def example_to_dict(e: TrainingExample) -> dict:
    return {
        "s_prime": e.s_prime.tolist(),
        "t_clean": e.t_clean.tolist(),
        "t_noised": e.t_noised.tolist(),
        "span_boundaries": list(map(int, e.span_boundaries)),
        "fragment_spans": [list(map(int, s)) for s in e.fragment_spans],
        "positions": e.positions.tolist(),
        "segments": e.segments.tolist(),
        "attn_positions": e.attn_positions.tolist(),
        "noised": e.noised.astype(int).tolist(),
        "loss_mask": e.loss_mask.astype(int).tolist(),
        "dist_index": e.dist_index,
    }


def dump_examples_text(path, examples: Iterable[TrainingExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in examples:
            fh.write(json.dumps(example_to_dict(e), sort_keys=True) + "\n")
