"""Command-line entry points.

Settings come from an INI file (``--config``) whose sections mirror the
configuration types; ``--set section.key=value`` and the per-command
shortcut flags override file values, which override built-in defaults.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
``MULTIFLOW_LOG_LEVEL`` sets log verbosity (default WARNING).
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .analysis import analyze_attention, format_report
from .checkpoint import CheckpointError
from .data import (FragmentSamplingConfig, NoiseConfig, assemble_example, dump_examples_text, example_rng,
                   save_examples)
from .decode import DecodeConfig, beam_decode, greedy_decode
from .metrics import METRICS, EvalPair, evaluate
from .model import ModelConfig, MultiFlowModel, build_masks
from .optim import OptimizerConfig
from .spans import SpanVocab, build_span_vocab, count_ngrams
from .tasks import TASKS
from .text import NUM_RESERVED, CorpusError, Vocab, build_vocab, decode, encode, load_corpus
from .train import NumericalError, RunLockedError, TrainConfig, run_finetune, run_pretrain

logger = logging.getLogger("multiflow")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

SECTIONS = {
    "model": ModelConfig,
    "fragments": FragmentSamplingConfig,
    "noise": NoiseConfig,
    "optimizer": OptimizerConfig,
    "train": TrainConfig,
    "decode": DecodeConfig,
}
PATH_KEYS = ("corpus", "vocab", "spans", "source", "target", "init", "checkpoint", "out_dir", "input", "output")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# configuration


@dataclasses.dataclass
class RunConfig:
    command: str
    paths: dict
    sections: dict          # section name -> {key: raw string}
    seed: int = 0
    mode: str = "noising"
    rates: tuple = (0.0, 0.2, 0.5)
    examples: int = 1000

    def build(self, section: str, **overrides):
        """Instantiate a config dataclass from its section, coercing by field type."""
        cls = SECTIONS[section]
        raw = dict(self.sections.get(section, {}))
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name in overrides:
                kwargs[f.name] = overrides[f.name]
                raw.pop(f.name, None)
            elif f.name in raw:
                kwargs[f.name] = _coerce(raw.pop(f.name), f.default, f"{section}.{f.name}")
        raw.pop("warmup_ratio", None)
        if raw:
            raise UsageError(f"unknown keys in [{section}]: {sorted(raw)}")
        return cls(**kwargs)

    def optimizer(self) -> OptimizerConfig:
        raw = self.sections.get("optimizer", {})
        if "warmup_ratio" in raw:
            if "warmup_steps" in raw:
                raise UsageError("give optimizer.warmup_steps or optimizer.warmup_ratio, not both")
            total = int(raw.get("total_steps", self.build("train").steps))
            steps = int(round(float(raw["warmup_ratio"]) * total))
            return self.build("optimizer", warmup_steps=steps, total_steps=total)
        if "total_steps" not in raw:
            steps = self.build("train").steps
            return self.build("optimizer", total_steps=steps,
                              warmup_steps=min(steps, int(raw.get("warmup_steps", max(1, steps // 10)))))
        return self.build("optimizer")

    def path(self, key: str, required: bool = True) -> Path | None:
        value = self.paths.get(key)
        if not value:
            if required:
                raise UsageError(f"missing path: set paths.{key} in the config or pass --{key.replace('_', '-')}")
            return None
        return Path(value)

    def manifest(self) -> dict:
        return {"command": self.command, "seed": self.seed, "mode": self.mode, "paths": self.paths,
                "sections": self.sections, "rates": list(self.rates), "examples": self.examples}


def _coerce(value: str, default, name: str):
    try:
        if isinstance(default, bool):
            return value.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            return tuple(tuple(float(x) if "." in x else int(x) for x in item.split(":"))
                         for item in value.split(","))
    except ValueError as exc:
        raise UsageError(f"{name}: cannot parse {value!r}") from exc
    return value


def load_run_config(args) -> RunConfig:
    parser = configparser.ConfigParser()
    if args.config:
        if not Path(args.config).exists():
            raise UsageError(f"config file {args.config} not found")
        parser.read(args.config, encoding="utf-8")
    sections = {s: dict(parser[s]) for s in parser.sections()}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        sections.setdefault(section, {})[name] = value
    paths = dict(sections.pop("paths", {}))
    for key in PATH_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            paths[key] = str(value)
    run = sections.pop("run", {})
    for key in ("seed", "mode"):
        value = getattr(args, key, None)
        if value is not None:
            run[key] = str(value)
    analysis = sections.pop("analysis", {})
    if getattr(args, "rates", None):
        analysis["rates"] = args.rates
    if getattr(args, "examples", None):
        analysis["examples"] = str(args.examples)
    unknown = set(sections) - set(SECTIONS)
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    try:
        rates = tuple(float(x) for x in analysis.get("rates", "0,0.2,0.5").split(","))
        cfg = RunConfig(args.command, paths, sections, seed=int(run.get("seed", 0)),
                        mode=run.get("mode", "noising"), rates=rates,
                        examples=int(analysis.get("examples", 1000)))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if cfg.mode not in ("noising", "masking"):
        raise UsageError(f"run.mode must be noising or masking, got {cfg.mode!r}")
    return cfg


# ---------------------------------------------------------------------------
# helpers


def _read_lines(path: Path) -> list[str]:
    try:
        return path.read_text(encoding="utf-8").splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def _load_vocab(cfg: RunConfig) -> Vocab:
    try:
        return Vocab.load(cfg.path("vocab"))
    except OSError as exc:
        raise DataError(f"cannot read vocabulary: {exc}") from exc


def _load_pairs(cfg: RunConfig, vocab: Vocab, limit: int | None = None) -> list[tuple[list[int], list[int]]]:
    src, tgt = _read_lines(cfg.path("source")), _read_lines(cfg.path("target"))
    if len(src) != len(tgt):
        raise DataError(f"source has {len(src)} lines but target has {len(tgt)}")
    pairs = []
    for s, t in zip(src, tgt):
        s_ids, t_ids = encode(s, vocab), encode(t, vocab)
        if not s_ids:
            continue
        if limit is not None:
            # keep [source; target; EOS] within the position table
            s_ids = s_ids[:max(limit // 2, limit - 1 - len(t_ids))]
            t_ids = t_ids[:limit - 1 - len(s_ids)]
        pairs.append((s_ids, t_ids))
    if not pairs:
        raise DataError("no usable (source, target) pairs")
    return pairs


def _span_vocab(cfg: RunConfig, sequences) -> SpanVocab:
    path = cfg.path("spans", required=False)
    if path is not None:
        try:
            return SpanVocab.load(path)
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read span vocabulary: {exc}") from exc
    logger.info("no span vocabulary given; building one from the training targets")
    return build_span_vocab(count_ngrams(sequences))


def _load_model(path: Path) -> MultiFlowModel:
    try:
        model, _, _ = MultiFlowModel.load(path)
    except (CheckpointError, OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    return model


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# commands


def cmd_build_vocab(args, cfg: RunConfig) -> int:
    reader = load_corpus(cfg.path("corpus"), None)
    vocab = build_vocab((text for _, text in reader.lines()), args.min_count, args.max_size)
    vocab.save(args.out)
    print(f"{len(vocab)} entries ({len(vocab) - NUM_RESERVED} regular) -> {args.out}")
    return EXIT_OK


def cmd_build_spans(args, cfg: RunConfig) -> int:
    docs = list(load_corpus(cfg.path("corpus"), _load_vocab(cfg)))
    counts = count_ngrams(docs)
    spans = build_span_vocab(counts, args.bigram_top, args.trigram_top)
    spans.save(args.out)
    print(f"{len(spans.unigrams)} unigrams, {len(spans.bigrams)} bigrams, {len(spans.trigrams)} trigrams -> {args.out}")
    return EXIT_OK


def cmd_make_data(args, cfg: RunConfig) -> int:
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    if args.task:
        prefix = Path(args.out)
        pairs = TASKS[args.task](args.n, vocab_size=args.vocab_size, seed=cfg.seed)
        vocab = Vocab(f"t{i}" for i in range(NUM_RESERVED, args.vocab_size))
        vocab.save(f"{prefix}.vocab")
        with open(f"{prefix}.src", "w", encoding="utf-8") as fs, open(f"{prefix}.tgt", "w", encoding="utf-8") as ft:
            for s, t in pairs:
                fs.write(decode(s, vocab) + "\n")
                ft.write(decode(t, vocab) + "\n")
        print(f"{len(pairs)} {args.task} pairs -> {prefix}.src / {prefix}.tgt (vocab {prefix}.vocab)")
        return EXIT_OK
    vocab = _load_vocab(cfg)
    model_cfg = cfg.build("model", vocab_size=len(vocab))
    docs = [d.tokens[:model_cfg.max_positions] for d in load_corpus(cfg.path("corpus"), vocab)]
    docs = [d for d in docs if len(d) >= 2]
    if not docs:
        raise DataError("corpus has no document with at least two tokens")
    spans = _span_vocab(cfg, docs)
    frag = cfg.build("fragments")
    noise = cfg.build("noise", vocab_size=len(vocab))
    examples = [assemble_example(docs[k % len(docs)], spans, frag, noise, example_rng(cfg.seed, k))
                for k in range(args.n or len(docs))]
    count = save_examples(args.out, examples)
    if args.dump:
        dump_examples_text(args.dump, examples)
    print(f"{count} examples -> {args.out}")
    return EXIT_OK


def _train_common(cfg: RunConfig):
    return cfg.optimizer(), cfg.build("train", seed=cfg.seed, mode=cfg.mode)


def cmd_pretrain(args, cfg: RunConfig) -> int:
    vocab = _load_vocab(cfg)
    model_cfg = cfg.build("model", vocab_size=len(vocab))
    model = MultiFlowModel(model_cfg, seed=cfg.seed)
    opt, tc = _train_common(cfg)
    noise = cfg.build("noise", vocab_size=len(vocab))
    manifest = cfg.manifest()
    if cfg.paths.get("corpus"):
        corpus = cfg.path("corpus")
        docs = [list(d.tokens) for d in load_corpus(corpus, vocab)]
        manifest["corpus_sha256"] = _sha256(corpus)
        spans = _span_vocab(cfg, docs)
        result = run_pretrain(model, spans, opt, tc, cfg.path("out_dir"), documents=docs,
                              frag_config=cfg.build("fragments"), noise_config=noise, manifest=manifest)
    else:
        pairs = _load_pairs(cfg, vocab, model_cfg.max_positions)
        spans = _span_vocab(cfg, [t for _, t in pairs])
        result = run_pretrain(model, spans, opt, tc, cfg.path("out_dir"), pairs=pairs, noise_config=noise,
                              manifest=manifest)
    _report(result)
    return EXIT_OK


def cmd_finetune(args, cfg: RunConfig) -> int:
    vocab = _load_vocab(cfg)
    model = _load_model(cfg.path("init"))
    if model.config.vocab_size != len(vocab):
        raise DataError(f"checkpoint vocabulary size {model.config.vocab_size} != {len(vocab)}")
    pairs = _load_pairs(cfg, vocab, model.config.max_positions)
    spans = _span_vocab(cfg, [t for _, t in pairs])
    opt, tc = _train_common(cfg)
    noise = cfg.build("noise", vocab_size=len(vocab))
    result = run_finetune(model, pairs, spans, noise, opt, tc, cfg.path("out_dir"), manifest=cfg.manifest())
    _report(result)
    return EXIT_OK


def _report(result) -> None:
    last = result.log.entries[-1] if result.log.entries else None
    summary = f"; last total {last.total:.6f} at step {last.step}" if last else ""
    print(f"checkpoint -> {result.checkpoint}{summary}")


def cmd_decode(args, cfg: RunConfig) -> int:
    vocab = _load_vocab(cfg)
    model = _load_model(cfg.path("checkpoint"))
    dc = cfg.build("decode")
    limit = model.config.max_positions
    lines = _read_lines(cfg.path("input"))
    out_path = cfg.path("output")
    with open(out_path, "w", encoding="utf-8") as fh:
        for k, line in enumerate(lines):
            src = encode(line, vocab)[:limit - 1]
            room = limit - len(src)
            line_cfg = dataclasses.replace(dc, max_length=max(1, min(dc.max_length, room)))
            if not src:
                ids, score = [], 0.0
            elif dc.beam_size == 1 and dc.length_penalty == 0.0:
                ids, score = greedy_decode(model, src, line_cfg), None
            else:
                best = beam_decode(model, src, line_cfg)
                ids, score = (best[0].surface, best[0].score(dc.length_penalty)) if best else ([], None)
            text = decode(ids, vocab)
            if args.verbose:
                fh.write(json.dumps({"line": k, "source": line, "ids": ids, "text": text, "score": score}) + "\n")
            else:
                fh.write(text + "\n")
    manifest = {**cfg.manifest(), "decode": dataclasses.asdict(dc), "lines": len(lines)}
    Path(f"{out_path}.manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"{len(lines)} lines -> {out_path}")
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    hyps = _read_lines(Path(args.hyp))
    refs = [_read_lines(Path(r)) for r in args.ref]
    for r, lines in zip(args.ref, refs):
        if len(lines) != len(hyps):
            raise DataError(f"{r} has {len(lines)} lines but {args.hyp} has {len(hyps)}")
    pairs = [EvalPair(h, [r[i] for r in refs]) for i, h in enumerate(hyps)]
    metrics = args.metrics.split(",") if args.metrics else list(METRICS)
    try:
        report = evaluate(pairs, metrics)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    text = report.to_text()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    if args.per_pair:
        Path(args.per_pair).write_text(report.per_pair_tsv())
    return EXIT_OK


def cmd_analyze_attention(args, cfg: RunConfig) -> int:
    vocab = _load_vocab(cfg)
    model = _load_model(cfg.path("checkpoint"))
    pairs = _load_pairs(cfg, vocab, model.config.max_positions)
    spans = _span_vocab(cfg, [t for _, t in pairs])
    rows = analyze_attention(model, pairs, cfg.rates, spans, num_examples=cfg.examples, seed=cfg.seed)
    text = format_report(rows)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def _grid(name: str, allowed: np.ndarray) -> str:
    rows = ["".join("1" if v else "0" for v in row) for row in allowed]
    return f"# {name} {allowed.shape[0]}x{allowed.shape[1]}\n" + "\n".join(rows) + "\n"


def cmd_dump_masks(args, cfg: RunConfig) -> int:
    bounds = [int(x) for x in args.boundaries.split(",")] if args.boundaries else [0]
    try:
        masks = build_masks(args.src_len, args.tgt_len, bounds)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    sys.stdout.write("".join(_grid(name, masks.allowed(name)) for name in ("contextual", "word", "span")))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    top = _Parser(prog="multiflow", description=__doc__.split("\n\n")[0])
    sub = top.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, func, help_text, paths=()):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="INI configuration file")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
        p.add_argument("--seed", type=int)
        for key in paths:
            p.add_argument(f"--{key.replace('_', '-')}", dest=key)
        p.set_defaults(func=func)
        return p

    p = command("build-vocab", cmd_build_vocab, "build a vocabulary from a corpus", ("corpus",))
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--max-size", type=int)
    p.add_argument("--out", required=True)

    p = command("build-spans", cmd_build_spans, "build the t-statistic span vocabulary", ("corpus", "vocab"))
    p.add_argument("--bigram-top", type=int, default=2000)
    p.add_argument("--trigram-top", type=int, default=500)
    p.add_argument("--out", required=True)

    p = command("make-data", cmd_make_data, "generate toy pairs or assembled pretraining examples",
                ("corpus", "vocab", "spans"))
    p.add_argument("--task", choices=sorted(TASKS))
    p.add_argument("--n", type=int, default=0)
    p.add_argument("--vocab-size", type=int, default=64)
    p.add_argument("--dump", help="also write assembled examples as JSON lines")
    p.add_argument("--out", required=True)

    command("pretrain", cmd_pretrain, "multi-flow pretraining",
            ("corpus", "vocab", "spans", "source", "target", "out_dir"))
    p = command("finetune", cmd_finetune, "fine-tune in noising or masking mode",
                ("vocab", "spans", "source", "target", "init", "out_dir"))
    p.add_argument("--mode", choices=["noising", "masking"])

    p = command("decode", cmd_decode, "infilling decoding of a source file",
                ("vocab", "checkpoint", "input", "output"))
    p.add_argument("--verbose", action="store_true", help="write JSON lines with ids and scores")

    p = command("evaluate", cmd_evaluate, "score hypotheses against references")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True, action="append")
    p.add_argument("--metrics", help=f"comma-separated subset of {','.join(METRICS)}")
    p.add_argument("--out")
    p.add_argument("--per-pair", help="write per-pair ROUGE scores as TSV")

    p = command("analyze-attention", cmd_analyze_attention, "word-flow attention split by noise status",
                ("vocab", "spans", "source", "target", "checkpoint"))
    p.add_argument("--rates", help="comma-separated noise rates")
    p.add_argument("--examples", type=int)
    p.add_argument("--out")

    p = command("dump-masks", cmd_dump_masks, "print the three attention masks as 0/1 grids")
    p.add_argument("--src-len", type=int, required=True)
    p.add_argument("--tgt-len", type=int, required=True)
    p.add_argument("--boundaries", help="comma-separated span starts (default: one span)")
    return top


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("MULTIFLOW_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args)
        logger.info("seed %d", cfg.seed)
        return args.func(args, cfg)
    except (UsageError, RunLockedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CorpusError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, T.NonFiniteError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
