"""Training loops: multi-flow pretraining and the two fine-tuning modes.

Each step draws its examples and dropout masks from a generator seeded by
``(seed, step)``, so a run resumed from a checkpoint continues exactly as
the uninterrupted run would have.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint
from .data import (FragmentSamplingConfig, NoiseConfig, TrainingExample, assemble_example, assemble_pair,
                   collate, example_rng, example_to_dict)
from .model import MultiFlowModel
from .optim import AdamState, OptimizerConfig, adam_step
from .spans import SpanVocab

logger = logging.getLogger(__name__)

PRETRAIN_LAMBDA = 0.5
FINETUNE_LAMBDA = 1.0
CHECKPOINT_NAME = "checkpoint.mf"


class NumericalError(FloatingPointError):
    """Raised when a training step produces a non-finite loss or gradient."""


class RunLockedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 32
    smoothing: float = 0.0
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 0
    mode: str = "noising"
    mask_prob: float = 0.7

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.smoothing < 1.0:
            raise ValueError("smoothing must lie in [0, 1)")
        if self.mode not in ("noising", "masking"):
            raise ValueError(f"unknown fine-tuning mode {self.mode!r}")


@dataclass
class LogEntry:
    step: int
    word_loss: float
    span_loss: float
    total: float
    lam: float
    lr: float
    wall_time: float


@dataclass
class TrainLog:
    entries: list[LogEntry] = field(default_factory=list)
    snapshots: list[dict] = field(default_factory=list)

    def append(self, entry: LogEntry) -> None:
        if self.entries and entry.step <= self.entries[-1].step:
            raise ValueError(f"log steps must increase ({self.entries[-1].step} -> {entry.step})")
        self.entries.append(entry)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(e)) + "\n" for e in self.entries)


@dataclass
class TrainResult:
    model: MultiFlowModel
    log: TrainLog
    checkpoint: Path
    steps_run: int


# ---------------------------------------------------------------------------
# run-directory plumbing


class _RunLock:
    def __init__(self, directory: Path):
        self.path = directory / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunLockedError(f"{self.path} exists: another run owns this directory") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


def _adam_arrays(state: AdamState) -> dict[str, np.ndarray]:
    out = {f"adam_m/{k}": v for k, v in state.m.items()}
    out.update({f"adam_v/{k}": v for k, v in state.v.items()})
    return out


def _adam_from(extra: dict[str, np.ndarray], step: int) -> AdamState:
    m = {k[len("adam_m/"):]: v.copy() for k, v in extra.items() if k.startswith("adam_m/")}
    v = {k[len("adam_v/"):]: v.copy() for k, v in extra.items() if k.startswith("adam_v/")}
    return AdamState(m, v, step)


def save_training_state(path, model: MultiFlowModel, state: AdamState, step: int, manifest: dict) -> None:
    model.save(path, extra=_adam_arrays(state), meta={"step": step, "run": manifest})


def load_training_state(path) -> tuple[MultiFlowModel, AdamState, int, dict]:
    model, extra, meta = MultiFlowModel.load(path)
    step = int(meta.get("step", 0))
    return model, _adam_from(extra, step), step, meta


def write_manifest(directory: Path, manifest: dict) -> Path:
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _dump_bad_batch(directory: Path, examples: Sequence[TrainingExample], step: int, detail: str) -> Path:
    path = directory / f"nonfinite_step{step}.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"step": step, "detail": detail}) + "\n")
        for e in examples:
            fh.write(json.dumps(example_to_dict(e)) + "\n")
    return path


# ---------------------------------------------------------------------------
# generic loop


def train_loop(model: MultiFlowModel, make_example: Callable[[np.random.Generator], TrainingExample],
               lam: float, opt: OptimizerConfig, tc: TrainConfig, out_dir, manifest: dict,
               resume: bool = True) -> TrainResult:
    """Shared driver: assemble, forward both flows, loss, backward, Adam.

    If ``out_dir`` already holds a checkpoint and ``resume`` is set, model
    weights, Adam moments and the step counter are restored from it.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / CHECKPOINT_NAME
    manifest = {**manifest, "lam": lam, "optimizer": asdict(opt), "train": asdict(tc),
                "model": asdict(model.config)}
    log = TrainLog()
    with _RunLock(out_dir):
        state, start = AdamState(), 0
        if resume and ckpt.exists():
            try:
                restored, state, start, _ = load_training_state(ckpt)
            except (CheckpointError, KeyError, ValueError) as exc:
                raise CheckpointError(f"cannot resume from {ckpt}: {exc}") from exc
            model.load_state_dict(restored.state_dict())
            logger.info("resumed from %s at step %d", ckpt, start)
        write_manifest(out_dir, manifest)
        t0 = time.time()
        log_fh = open(out_dir / "train_log.jsonl", "a" if start else "w", encoding="utf-8")
        with log_fh:
            for step in range(start + 1, tc.steps + 1):
                rng = example_rng(tc.seed, step)
                examples = [make_example(rng) for _ in range(tc.batch_size)]
                batch = collate(examples)
                if not batch.loss_mask.any():
                    logger.warning("step %d: no scored positions in batch; skipping update", step)
                    continue
                model.zero_grad()
                parts = model.loss(batch, lam=lam, smoothing=tc.smoothing, train=True, rng=rng)
                total = parts.total.item()
                if not math.isfinite(total):
                    dump = _dump_bad_batch(out_dir, examples, step, f"loss={total}")
                    raise NumericalError(f"step {step}: non-finite loss {total}; batch written to {dump}")
                T.backward(parts.total)
                grads = model.grads()
                bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
                if bad:
                    dump = _dump_bad_batch(out_dir, examples, step, f"non-finite grads in {bad}")
                    raise NumericalError(f"step {step}: non-finite gradients in {bad}; batch written to {dump}")
                lr = adam_step(model.params, grads, state, opt, step)
                if step == 1 or step % tc.log_every == 0 or step == tc.steps:
                    f = parts.as_floats()
                    entry = LogEntry(step, f["word_loss"], f["span_loss"], f["total"], lam, lr, time.time() - t0)
                    log.append(entry)
                    log_fh.write(json.dumps(asdict(entry)) + "\n")
                    log_fh.flush()
                    logger.info("step %d total %.4f word %.4f span %.4f lr %.2e",
                                step, entry.total, entry.word_loss, entry.span_loss, lr)
                if tc.checkpoint_every and step % tc.checkpoint_every == 0 and step != tc.steps:
                    save_training_state(ckpt, model, state, step, manifest)
        final = max(start, tc.steps)
        save_training_state(ckpt, model, state, final, manifest)
    return TrainResult(model, log, ckpt, tc.steps - start if tc.steps > start else 0)


# ---------------------------------------------------------------------------
# entry points


def _truncate(tokens: Sequence[int], limit: int) -> list[int]:
    return list(tokens[:limit])


def run_pretrain(model: MultiFlowModel, span_vocab: SpanVocab, opt: OptimizerConfig, tc: TrainConfig, out_dir,
                 documents: Sequence[Sequence[int]] | None = None,
                 pairs: Sequence[tuple[Sequence[int], Sequence[int]]] | None = None,
                 frag_config: FragmentSamplingConfig | None = None, noise_config: NoiseConfig | None = None,
                 resume: bool = True, manifest: dict | None = None) -> TrainResult:
    """Multi-flow pretraining with ``lam = 0.5``.

    With ``documents``, each example is carved out of a document by fragment
    sampling.  With ``pairs``, the (source, target) pairs are used directly
    (paired pretraining, as for the toy tasks).  Target inputs are corrupted
    at ``noise_config.rate`` either way.
    """
    if (documents is None) == (pairs is None):
        raise ValueError("pass exactly one of documents or pairs")
    frag_config = frag_config or FragmentSamplingConfig()
    noise_config = noise_config or NoiseConfig(rate=0.05, vocab_size=model.config.vocab_size)
    limit = model.config.max_positions
    info = {"kind": "pretrain", "fragments": asdict(frag_config), "noise": asdict(noise_config),
            **(manifest or {})}
    if documents is not None:
        docs = [_truncate(d, limit) for d in documents if len(d) >= 2]
        if not docs:
            raise ValueError("no document has at least two tokens")

        def make(rng):
            return assemble_example(docs[int(rng.integers(len(docs)))], span_vocab, frag_config, noise_config, rng)
    else:
        data = list(pairs)
        if not data:
            raise ValueError("no training pairs")

        def make(rng):
            s, t = data[int(rng.integers(len(data)))]
            return assemble_pair(s, t, span_vocab, noise_config, rng)
    return train_loop(model, make, PRETRAIN_LAMBDA, opt, tc, out_dir, info, resume)


def run_finetune(model: MultiFlowModel, pairs: Sequence[tuple[Sequence[int], Sequence[int]]],
                 span_vocab: SpanVocab, noise_config: NoiseConfig, opt: OptimizerConfig, tc: TrainConfig,
                 out_dir, resume: bool = True, manifest: dict | None = None) -> TrainResult:
    """Fine-tuning with ``lam = 1`` (word flow only).

    ``tc.mode == "noising"`` corrupts target inputs at ``noise_config.rate``
    and scores every target position; ``"masking"`` replaces targets with
    [MASK] at ``tc.mask_prob`` and scores only those positions.
    """
    data = list(pairs)
    if not data:
        raise ValueError("no training pairs")
    info = {"kind": "finetune", "mode": tc.mode, "noise": asdict(noise_config), **(manifest or {})}

    def make(rng):
        s, t = data[int(rng.integers(len(data)))]
        return assemble_pair(s, t, span_vocab, noise_config, rng, mode=tc.mode, mask_prob=tc.mask_prob)
    return train_loop(model, make, FINETUNE_LAMBDA, opt, tc, out_dir, info, resume)


def checkpoint_step(path) -> int:
    _, meta = load_checkpoint(path)
    return int(meta.get("step", 0))
