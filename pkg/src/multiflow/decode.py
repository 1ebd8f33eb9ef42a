"""Infilling decoding: insert an [ATTN] slot, read off a token, drop the slot.

Two interchangeable drivers produce next-token distributions:

* :class:`DecodeState` keeps the contextual stream's per-layer keys/values.
  Accepted tokens are appended to that cache; the [ATTN] query for the next
  position is computed against it and then discarded.
* :func:`step` recomputes the whole forward pass for ``[source; prefix]``
  with a single [ATTN] slot.

Because target rows of the contextual stream only look left, both give the
same distribution; the cached driver is the default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import MultiFlowModel
from .tensor import gelu_array, layer_norm_array, softmax_array
from .text import ATTN, EOS


@dataclass(frozen=True)
class DecodeConfig:
    max_length: int = 32
    beam_size: int = 1
    length_penalty: float = 0.0
    end_id: int = EOS
    min_length: int = 0

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.max_length < 1:
            raise ValueError("max_length must be >= 1")


@dataclass
class Hypothesis:
    tokens: tuple
    logprob: float
    finished: bool = False
    state: "DecodeState | None" = field(default=None, repr=False, compare=False)

    @property
    def surface(self) -> list[int]:
        """Emitted tokens without the end symbol."""
        return list(self.tokens[:-1]) if self.tokens and self.tokens[-1] == EOS and self.finished else list(self.tokens)

    def score(self, alpha: float) -> float:
        """Length-normalized score ``logprob / len(tokens) ** alpha``; the end token counts."""
        length = max(1, len(self.tokens))
        return self.logprob / (length ** alpha)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    return z - math.log(np.exp(z).sum())


def _suppress_end(logprobs: np.ndarray, generated: int, config: DecodeConfig) -> np.ndarray:
    if generated < config.min_length:
        logprobs = logprobs.copy()
        logprobs[config.end_id] = -np.inf
        logprobs = logprobs - np.logaddexp.reduce(logprobs[np.isfinite(logprobs)])
    return logprobs


def step(model: MultiFlowModel, source: Sequence[int], prefix: Sequence[int]) -> np.ndarray:
    """Next-token log-probabilities by full recomputation."""
    if len(source) + len(prefix) >= model.config.max_positions:
        raise ValueError(f"prefix reaches max_positions={model.config.max_positions}")
    return _log_softmax(model.next_token_logits(source, prefix))


class DecodeState:
    """Incremental inference state for one hypothesis."""

    def __init__(self, model: MultiFlowModel, source: Sequence[int]):
        self.model = model
        self.cfg = model.config
        self.p = {k: v.data for k, v in model.params.items()}
        self.n = len(source)
        self.tokens: list[int] = []
        self.keys: list[np.ndarray] = []
        self.values: list[np.ndarray] = []
        if self.n >= self.cfg.max_positions:
            raise ValueError("source does not fit in max_positions")
        x = self._embed(np.asarray(source, dtype=np.int64), np.arange(self.n), 0)
        for l in range(self.cfg.layers):
            q, k, v = self._qkv(l, x)
            self.keys.append(k)
            self.values.append(v)
            x = self._block(l, x, q, k, v)

    def copy(self) -> "DecodeState":
        other = object.__new__(DecodeState)
        other.__dict__.update(self.__dict__)
        other.tokens = list(self.tokens)
        other.keys = list(self.keys)
        other.values = list(self.values)
        return other

    @property
    def next_position(self) -> int:
        return self.n + len(self.tokens)

    def _embed(self, ids: np.ndarray, pos: np.ndarray, seg: int) -> np.ndarray:
        p = self.p
        return p["tok_emb"][ids] + p["pos_emb"][pos] + p["seg_emb"][seg]

    def _qkv(self, l: int, x: np.ndarray):
        p, pre, cfg = self.p, f"layers.{l}.", self.cfg
        h = layer_norm_array(x, p[pre + "ln1.g"], p[pre + "ln1.b"], cfg.ln_eps)
        A, d = cfg.heads, cfg.head_dim

        def heads(t):
            return t.reshape(len(x), A, d).transpose(1, 0, 2)

        return (heads(h @ p[pre + "w_q"] + p[pre + "b_q"]),
                heads(h @ p[pre + "w_k"] + p[pre + "b_k"]),
                heads(h @ p[pre + "w_v"] + p[pre + "b_v"]))

    def _block(self, l: int, x: np.ndarray, q: np.ndarray, keys: np.ndarray, values: np.ndarray) -> np.ndarray:
        p, pre, cfg = self.p, f"layers.{l}.", self.cfg
        probs, _ = softmax_array(q @ keys.transpose(0, 2, 1) * (1.0 / math.sqrt(cfg.head_dim)))
        ctx = (probs @ values).transpose(1, 0, 2).reshape(len(x), cfg.hidden)
        x = x + ctx @ p[pre + "w_o"] + p[pre + "b_o"]
        h = layer_norm_array(x, p[pre + "ln2.g"], p[pre + "ln2.b"], cfg.ln_eps)
        return x + gelu_array(h @ p[pre + "w_1"] + p[pre + "b_1"]) @ p[pre + "w_2"] + p[pre + "b_2"]

    def append(self, token: int) -> None:
        """Accept ``token`` into the contextual stream (cached keys/values grow by one)."""
        pos = self.next_position
        if pos >= self.cfg.max_positions:
            raise ValueError(f"position {pos} exceeds max_positions={self.cfg.max_positions}")
        x = self._embed(np.array([token]), np.array([pos]), 1)
        for l in range(self.cfg.layers):
            q, k, v = self._qkv(l, x)
            self.keys[l] = np.concatenate([self.keys[l], k], axis=1)
            self.values[l] = np.concatenate([self.values[l], v], axis=1)
            x = self._block(l, x, q, self.keys[l], self.values[l])
        self.tokens.append(int(token))

    def query_logits(self) -> np.ndarray:
        """Insert [ATTN] at the next position, run it through every layer, drop it."""
        pos = self.next_position
        if pos >= self.cfg.max_positions:
            raise ValueError(f"position {pos} exceeds max_positions={self.cfg.max_positions}")
        a = self._embed(np.array([ATTN]), np.array([pos]), 1)
        for l in range(self.cfg.layers):
            q, k, v = self._qkv(l, a)
            a = self._block(l, a, q, np.concatenate([self.keys[l], k], axis=1),
                            np.concatenate([self.values[l], v], axis=1))
        p = self.p
        h = layer_norm_array(a, p["ln_f.g"], p["ln_f.b"], self.cfg.ln_eps)
        return (h @ p["tok_emb"].T + p["out_bias"])[0]

    def logprobs(self) -> np.ndarray:
        return _log_softmax(self.query_logits())


def _next_logprobs(model, source, hyp: Hypothesis, incremental: bool, config: DecodeConfig) -> np.ndarray:
    if incremental:
        lp = hyp.state.logprobs()
    else:
        lp = step(model, source, hyp.tokens)
    return _suppress_end(lp, len(hyp.tokens), config)


def greedy_decode(model: MultiFlowModel, source: Sequence[int], config: DecodeConfig,
                  incremental: bool = True) -> list[int]:
    """Argmax decoding; ties go to the smaller id.  The end token is not returned."""
    state = DecodeState(model, source) if incremental else None
    out: list[int] = []
    for _ in range(config.max_length):
        lp = state.logprobs() if incremental else step(model, source, out)
        lp = _suppress_end(lp, len(out), config)
        tok = int(np.argmax(lp))
        if tok == config.end_id:
            break
        out.append(tok)
        if incremental and len(out) < config.max_length:
            state.append(tok)
    return out


def beam_decode(model: MultiFlowModel, source: Sequence[int], config: DecodeConfig,
                incremental: bool = True) -> list[Hypothesis]:
    """Beam search; returns finished hypotheses best first.

    Live hypotheses are ranked by cumulative log-probability, ties by token
    sequence.  A candidate ending in the end token among the top ``beam``
    candidates of a step is finished; search stops once ``beam`` hypotheses
    have finished or ``max_length`` tokens have been emitted, at which point
    surviving live hypotheses are finished as-is.  Final ranking uses
    :meth:`Hypothesis.score`.
    """
    beam = config.beam_size
    root = Hypothesis((), 0.0, state=DecodeState(model, source) if incremental else None)
    live = [root]
    finished: list[Hypothesis] = []
    for t in range(config.max_length):
        cands = []
        for h in live:
            lp = _next_logprobs(model, source, h, incremental, config)
            for v in np.nonzero(np.isfinite(lp))[0]:
                cands.append((h.logprob + float(lp[v]), h.tokens + (int(v),), h))
        cands.sort(key=lambda c: (-c[0], c[1]))
        new_live = []
        for rank, (score, toks, parent) in enumerate(cands):
            if toks[-1] == config.end_id:
                if rank < beam:
                    finished.append(Hypothesis(toks, score, finished=True))
                continue
            child = Hypothesis(toks, score, state=None)
            if incremental and t + 1 < config.max_length:
                child.state = parent.state.copy()
                child.state.append(toks[-1])
            new_live.append(child)
            if len(new_live) == beam:
                break
        if len(finished) >= beam:
            break
        live = new_live
        if not live:
            break
    else:
        finished.extend(Hypothesis(h.tokens, h.logprob, finished=True) for h in live)
    alpha = config.length_penalty
    finished.sort(key=lambda h: (-h.score(alpha), h.tokens))
    for h in finished:
        h.state = None
    return finished


def decode(model: MultiFlowModel, source: Sequence[int], config: DecodeConfig,
           incremental: bool = True) -> list[int]:
    if config.beam_size == 1 and config.length_penalty == 0.0:
        return greedy_decode(model, source, config, incremental)
    best = beam_decode(model, source, config, incremental)
    return best[0].surface if best else []
