"""Shared-parameter transformer with contextual, word-by-word and span-by-span flows.

One stack of layer weights serves three query streams.  The contextual
stream runs over ``X = [S'; T']`` under a prefix-LM mask.  The two
artificial streams are sequences of [ATTN] symbols, one per target index;
at layer ``l`` they read keys/values from ``X`` at the same layer plus their
own slot, never from each other, and ``X`` never reads from them.  That
one-way dependency is what lets the contextual stream be computed once and
shared.

Word slot ``i`` sees the source and targets ``< i``.  Span slot ``j`` inside
span ``[b, b')`` sees the source and targets ``< b``, so every token of a
span is predicted from the same history.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Batch
from .spans import span_starts_per_token
from .text import ATTN
from .tensor import NEG_INF, Tensor


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    layers: int = 2
    hidden: int = 64
    heads: int = 2
    ffn: int = 256
    max_positions: int = 64
    dropout: float = 0.0
    lam: float = 0.5
    init_std: float = 0.02
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} is not divisible by heads={self.heads}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        if self.layers < 0 or self.vocab_size < 1 or self.max_positions < 1:
            raise ValueError("layers, vocab_size and max_positions must be positive")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ---------------------------------------------------------------------------
# masks


@dataclass
class FlowMasks:
    """Additive masks (0 = attend, NEG_INF = blocked) for one example.

    ``contextual`` is ``(n+m, n+m)`` over X.  ``word`` and ``span`` are
    ``(m, n+2m)``: columns are X followed by that flow's own [ATTN] slots.
    """
    contextual: np.ndarray
    word: np.ndarray
    span: np.ndarray

    def allowed(self, name: str) -> np.ndarray:
        return getattr(self, name) == 0.0


def _additive(allowed: np.ndarray) -> np.ndarray:
    return np.where(allowed, 0.0, NEG_INF)


def build_masks(src_len: int, tgt_len: int, boundaries: Sequence[int]) -> FlowMasks:
    n, m = int(src_len), int(tgt_len)
    if m > 0:
        if any(b < 0 or b >= m for b in boundaries):
            raise ValueError(f"span boundary out of range for target length {m}: {list(boundaries)}")
        starts = np.asarray(span_starts_per_token(boundaries, m))
    else:
        starts = np.zeros(0, dtype=np.int64)
    q = np.arange(n + m)[:, None]
    k = np.arange(n + m)[None, :]
    contextual = (k < n) | ((q >= n) & (k <= q))

    i = np.arange(m)[:, None]
    kx = np.arange(n + m)[None, :]
    own = np.eye(m, dtype=bool)
    word = np.concatenate([(kx < n) | (kx < n + i), own], axis=1)
    span = np.concatenate([(kx < n) | (kx < n + starts[:, None]), own], axis=1)
    return FlowMasks(_additive(contextual), _additive(word), _additive(span))


def batch_masks(src_len: np.ndarray, tgt_len: np.ndarray, span_start: np.ndarray,
                N: int, M: int) -> tuple[np.ndarray, np.ndarray]:
    """Padded masks for a batch.

    Returns ``mc`` of shape (B, 1, N, N) and ``ma`` of shape (B, 1, 2M, N+2M)
    whose first M rows are word slots and last M rows span slots; columns
    are X, then word slots, then span slots.  Padding rows are fully blocked.
    """
    n = np.asarray(src_len)[:, None, None]
    L = n + np.asarray(tgt_len)[:, None, None]
    m = np.asarray(tgt_len)[:, None, None]
    q = np.arange(N)[None, :, None]
    k = np.arange(N)[None, None, :]
    mc = (q < L) & (k < L) & ((k < n) | ((q >= n) & (k <= q)))

    i = np.arange(M)[None, :, None]
    kx = np.arange(N)[None, None, :]
    real = i < m
    limit_w = n + i
    limit_s = n + np.asarray(span_start)[:, :, None]
    x_w = real & ((kx < n) | (kx < limit_w))
    x_s = real & ((kx < n) | (kx < limit_s))
    own = (np.eye(M, dtype=bool)[None] & real)
    none = np.zeros_like(own)
    rows_w = np.concatenate([x_w, own, none], axis=2)
    rows_s = np.concatenate([x_s, none, own], axis=2)
    ma = np.concatenate([rows_w, rows_s], axis=1)
    return _additive(mc)[:, None], _additive(ma)[:, None]


# ---------------------------------------------------------------------------
# parameters


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    H, F, V, P = config.hidden, config.ffn, config.vocab_size, config.max_positions
    std = config.init_std
    p: dict[str, np.ndarray] = {
        "tok_emb": rng.normal(0, std, (V, H)),
        "pos_emb": rng.normal(0, std, (P, H)),
        "seg_emb": rng.normal(0, std, (2, H)),
    }
    for l in range(config.layers):
        pre = f"layers.{l}."
        for name in ("w_q", "w_k", "w_v", "w_o"):
            p[pre + name] = rng.normal(0, std, (H, H))
        for name in ("b_q", "b_k", "b_v", "b_o", "ln1.b", "ln2.b", "b_2"):
            p[pre + name] = np.zeros(H)
        p[pre + "ln1.g"] = np.ones(H)
        p[pre + "ln2.g"] = np.ones(H)
        p[pre + "w_1"] = rng.normal(0, std, (H, F))
        p[pre + "b_1"] = np.zeros(F)
        p[pre + "w_2"] = rng.normal(0, std / math.sqrt(2 * max(1, config.layers)), (F, H))
    p["ln_f.g"] = np.ones(H)
    p["ln_f.b"] = np.zeros(H)
    p["out_bias"] = np.zeros(V)
    return p


@dataclass
class LossBreakdown:
    word_loss: Tensor
    span_loss: Tensor
    total: Tensor
    lam: float = 0.5

    def as_floats(self) -> dict:
        return {"word_loss": self.word_loss.item(), "span_loss": self.span_loss.item(),
                "total": self.total.item()}


def compute_loss(word_logits: Tensor, span_logits: Tensor, targets: np.ndarray, loss_mask: np.ndarray,
                 lam: float, smoothing: float = 0.0) -> LossBreakdown:
    """``total = lam * word_loss + (1 - lam) * span_loss`` against the clean targets."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must lie in [0, 1], got {lam}")
    loss_mask = np.asarray(loss_mask, dtype=bool)
    if not loss_mask.any():
        raise ValueError("loss mask selects no positions")
    ignore = ~loss_mask
    word = T.cross_entropy_label_smoothed(word_logits, targets, smoothing, ignore)
    span = T.cross_entropy_label_smoothed(span_logits, targets, smoothing, ignore)
    total = T.add(T.mul(word, lam), T.mul(span, 1.0 - lam))
    return LossBreakdown(word, span, total, lam)


class MultiFlowModel:
    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.config = config
        arrays = init_params(config, seed) if params is None else params
        self.params: dict[str, Tensor] = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True)
                                          for k, v in arrays.items()}

    # -- persistence -------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
        for k, p in self.params.items():
            if arrays[k].shape != p.data.shape:
                raise ValueError(f"{k}: checkpoint shape {arrays[k].shape} != {p.data.shape}")
            p.data = np.array(arrays[k], dtype=np.float64)

    def save(self, path, extra: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> None:
        arrays = {f"model/{k}": v for k, v in self.state_dict().items()}
        arrays.update(extra or {})
        save_checkpoint(path, arrays, {"model_config": asdict(self.config), **(meta or {})})

    @classmethod
    def load(cls, path) -> tuple["MultiFlowModel", dict[str, np.ndarray], dict]:
        arrays, meta = load_checkpoint(path)
        config = ModelConfig.from_dict(meta["model_config"])
        params = {k[len("model/"):]: v for k, v in arrays.items() if k.startswith("model/")}
        model = cls(config, params)
        extra = {k: v for k, v in arrays.items() if not k.startswith("model/")}
        return model, extra, meta

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def grads(self) -> dict[str, np.ndarray]:
        return {k: p.grad for k, p in self.params.items()}

    # -- embeddings ----------------------------------------------------------

    def _check_positions(self, *pos_arrays) -> None:
        top = max((int(np.max(a)) for a in pos_arrays if np.size(a)), default=0)
        if top >= self.config.max_positions:
            raise ValueError(f"sequence needs position {top} but max_positions={self.config.max_positions}")

    def embed_tokens(self, ids: np.ndarray, pos: np.ndarray, seg: np.ndarray) -> Tensor:
        p = self.params
        self._check_positions(pos)
        return T.embedding(p["tok_emb"], ids) + T.embedding(p["pos_emb"], pos) + T.embedding(p["seg_emb"], seg)

    def embed(self, batch: Batch, flows: Sequence[str] = ("word", "span")) -> tuple[Tensor, Tensor]:
        """Input vectors for X ``(B, N, H)`` and the [ATTN] slots ``(B, k*M, H)``."""
        x0 = self.embed_tokens(batch.x_ids, batch.x_pos, batch.x_seg)
        a_pos = np.concatenate([batch.a_pos] * len(flows), axis=1)
        a0 = self.embed_tokens(np.full_like(a_pos, ATTN), a_pos, np.ones_like(a_pos))
        return x0, a0

    # -- layers ----------------------------------------------------------------

    def _heads(self, t: Tensor) -> Tensor:
        B, L, _ = t.shape
        A, d = self.config.heads, self.config.head_dim
        return T.transpose(T.reshape(t, (B, L, A, d)), (0, 2, 1, 3))

    def _merge(self, t: Tensor) -> Tensor:
        B, A, L, d = t.shape
        return T.reshape(T.transpose(t, (0, 2, 1, 3)), (B, L, A * d))

    def _project_qkv(self, l: int, h: Tensor):
        p, pre = self.params, f"layers.{l}."
        q = self._heads(h @ p[pre + "w_q"] + p[pre + "b_q"])
        k = self._heads(h @ p[pre + "w_k"] + p[pre + "b_k"])
        v = self._heads(h @ p[pre + "w_v"] + p[pre + "b_v"])
        return q, k, v

    def _attend(self, q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray):
        scale = 1.0 / math.sqrt(self.config.head_dim)
        scores = T.mul(q @ T.swapaxes(k, -1, -2), scale)
        probs = T.softmax_masked(scores, mask, allow_empty_rows=True)
        return probs @ v, probs

    def _finish_block(self, l: int, x: Tensor, ctx: Tensor, train: bool, rng) -> Tensor:
        p, pre, cfg = self.params, f"layers.{l}.", self.config
        x = x + T.dropout(self._merge(ctx) @ p[pre + "w_o"] + p[pre + "b_o"], cfg.dropout, rng, train)
        h = T.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"], cfg.ln_eps)
        h = T.gelu(h @ p[pre + "w_1"] + p[pre + "b_1"]) @ p[pre + "w_2"] + p[pre + "b_2"]
        return x + T.dropout(h, cfg.dropout, rng, train)

    def run_layers(self, x0: Tensor, a0: Tensor | None, mc: np.ndarray, ma: np.ndarray | None,
                   train: bool = False, rng: np.random.Generator | None = None,
                   record_attention: bool = False) -> dict:
        """Run every layer over the contextual stream and (optionally) the [ATTN] slots.

        Returns ``{"x": [X^(0), ..., X^(L)], "a": A^(L) or None, "attention": probs}``
        where ``attention`` holds the last layer's slot-query weights when
        requested.
        """
        cfg, p = self.config, self.params
        xs = [x0]
        x, a = x0, a0
        last_probs = None
        for l in range(cfg.layers):
            pre = f"layers.{l}."
            h = T.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"], cfg.ln_eps)
            qx, kx, vx = self._project_qkv(l, h)
            if a is not None:
                ha = T.layer_norm(a, p[pre + "ln1.g"], p[pre + "ln1.b"], cfg.ln_eps)
                qa, ka, va = self._project_qkv(l, ha)
                ctx_a, probs_a = self._attend(qa, T.concat([kx, ka], axis=2), T.concat([vx, va], axis=2), ma)
                a = self._finish_block(l, a, ctx_a, train, rng)
                if record_attention and l == cfg.layers - 1:
                    last_probs = probs_a.data
            ctx_x, _ = self._attend(qx, kx, vx, mc)
            x = self._finish_block(l, x, ctx_x, train, rng)
            xs.append(x)
        return {"x": xs, "a": a, "attention": last_probs}

    def logits(self, states: Tensor) -> Tensor:
        p = self.params
        h = T.layer_norm(states, p["ln_f.g"], p["ln_f.b"], self.config.ln_eps)
        return h @ T.transpose(p["tok_emb"]) + p["out_bias"]

    # -- flows -----------------------------------------------------------------

    def _slot_mask(self, ma: np.ndarray, M: int, N: int, flows: Sequence[str]) -> np.ndarray:
        rows, cols = [], [np.arange(N)]
        for name in flows:
            k = 0 if name == "word" else 1
            rows.append(np.arange(k * M, (k + 1) * M))
            cols.append(N + k * M + np.arange(M))
        r, c = np.concatenate(rows), np.concatenate(cols)
        return ma[:, :, r][:, :, :, c]

    def masks_for(self, batch: Batch, flows: Sequence[str] = ("word", "span")):
        N, M = batch.x_ids.shape[1], batch.a_pos.shape[1]
        mc, ma = batch_masks(batch.src_len, batch.tgt_len, batch.span_start, N, M)
        if tuple(flows) != ("word", "span"):
            ma = self._slot_mask(ma, M, N, flows)
        return mc, ma

    def forward_contextual(self, batch: Batch) -> list[Tensor]:
        """States of the contextual stream at every layer (index 0 = embeddings)."""
        x0 = self.embed_tokens(batch.x_ids, batch.x_pos, batch.x_seg)
        mc, _ = self.masks_for(batch)
        return self.run_layers(x0, None, mc, None)["x"]

    def forward_multiflow(self, batch: Batch, flows: Sequence[str] = ("word", "span"), train: bool = False,
                          rng: np.random.Generator | None = None, record_attention: bool = False):
        """Logits ``(B, M, V)`` for each requested flow, in the order given.

        Returns a tuple of logits, plus the run record when
        ``record_attention`` is set.
        """
        flows = tuple(flows)
        x0, a0 = self.embed(batch, flows)
        mc, ma = self.masks_for(batch, flows)
        out = self.run_layers(x0, a0, mc, ma, train=train, rng=rng, record_attention=record_attention)
        logits = self.logits(out["a"])
        M = batch.a_pos.shape[1]
        parts = tuple(logits[:, k * M:(k + 1) * M] for k in range(len(flows)))
        return (parts, out) if record_attention else parts

    def loss(self, batch: Batch, lam: float | None = None, smoothing: float = 0.0, train: bool = False,
             rng: np.random.Generator | None = None) -> LossBreakdown:
        word, span = self.forward_multiflow(batch, train=train, rng=rng)
        lam = self.config.lam if lam is None else lam
        return compute_loss(word, span, batch.targets, batch.loss_mask, lam, smoothing)

    # -- single-query inference ------------------------------------------------

    def next_token_logits(self, source: Sequence[int], prefix: Sequence[int]) -> np.ndarray:
        """Word-flow logits for target index ``len(prefix)``, recomputed from scratch.

        X is ``[source; prefix]`` and a single [ATTN] slot sits at the next
        position, attending the whole of X and itself.
        """
        n, t = len(source), len(prefix)
        ids = np.asarray(list(source) + list(prefix), dtype=np.int64)[None]
        pos = np.arange(n + t)[None]
        seg = np.r_[np.zeros(n, np.int64), np.ones(t, np.int64)][None]
        a_pos = np.array([[n + t]])
        with T.no_grad():
            x0 = self.embed_tokens(ids, pos, seg)
            a0 = self.embed_tokens(np.array([[ATTN]]), a_pos, np.ones_like(a_pos))
            mc = build_masks(n, t, [0] if t else []).contextual[None, None]
            ma = np.zeros((1, 1, 1, n + t + 1))
            out = self.run_layers(x0, a0, mc, ma)
            return self.logits(out["a"]).data[0, 0]
