"""Whitespace tokenization, vocabularies and corpus I/O."""

from __future__ import annotations

import logging
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

logger = logging.getLogger(__name__)

PAD, BOS, EOS, UNK, ATTN, MASK = 0, 1, 2, 3, 4, 5
RESERVED = ("[PAD]", "[BOS]", "[EOS]", "[UNK]", "[ATTN]", "[MASK]")
NUM_RESERVED = len(RESERVED)


class CorpusError(IOError):
    pass


class Vocab:
    """Token <-> id table with the six reserved symbols pinned to ids 0..5."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for tok in tokens:
            if tok in self.stoi:
                raise ValueError(f"duplicate token {tok!r}")
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def lookup(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    @property
    def regular_ids(self) -> range:
        """Ids that are not reserved symbols (noise replacement candidates)."""
        return range(NUM_RESERVED, len(self.itos))

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[:NUM_RESERVED]) != RESERVED:
            raise CorpusError(f"{path}: first {NUM_RESERVED} lines must be the reserved symbols")
        return cls(lines[NUM_RESERVED:])


def tokenize(text: str, lowercase: bool = True) -> list[str]:
    return (text.lower() if lowercase else text).split()


def build_vocab(corpus: Iterable[str], min_count: int = 1, max_size: int | None = None,
                lowercase: bool = True) -> Vocab:
    """Vocabulary ordered by descending frequency, ties broken lexicographically.

    ``max_size`` caps the number of non-reserved tokens.
    """
    counts: Counter[str] = Counter()
    lines = 0
    for line in corpus:
        lines += 1
        counts.update(tokenize(line, lowercase))
    if lines == 0:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    ranked = sorted((t for t, c in counts.items() if c >= min_count and t not in RESERVED),
                    key=lambda t: (-counts[t], t))
    if max_size is not None:
        ranked = ranked[:max_size]
    return Vocab(ranked)


def encode(text: str, vocab: Vocab, lowercase: bool = True, max_len: int | None = 512) -> list[int]:
    ids = [vocab.lookup(t) for t in tokenize(text, lowercase)]
    return ids if max_len is None else ids[:max_len]


def decode(ids: Iterable[int], vocab: Vocab, strip_special: bool = True) -> str:
    toks = []
    for i in ids:
        i = int(i)
        if strip_special and i in (PAD, BOS, EOS):
            continue
        toks.append(vocab.token(i))
    return " ".join(toks)


@dataclass(frozen=True)
class Document:
    id: str
    tokens: tuple[int, ...]


class CorpusReader:
    """Stream a one-document-per-line UTF-8 file.

    Lines that are not valid UTF-8 are skipped with a logged warning and
    counted in :attr:`warnings`; blank lines are skipped silently.
    """

    def __init__(self, path, vocab: Vocab | None = None, lowercase: bool = True,
                 max_len: int | None = 512):
        self.path = Path(path)
        self.vocab = vocab
        self.lowercase = lowercase
        self.max_len = max_len
        self.warnings = 0

    def lines(self) -> Iterator[tuple[int, str]]:
        self.warnings = 0
        try:
            fh = open(self.path, "rb")
        except OSError as exc:
            raise CorpusError(f"cannot read corpus {self.path}: {exc}") from exc
        with fh:
            for lineno, raw in enumerate(fh):
                try:
                    text = raw.decode("utf-8")
                except UnicodeDecodeError:
                    self.warnings += 1
                    logger.warning("%s:%d: skipping line that is not valid UTF-8", self.path, lineno + 1)
                    continue
                text = text.rstrip("\r\n")
                if text.strip():
                    yield lineno, text

    def __iter__(self) -> Iterator[Document]:
        if self.vocab is None:
            raise CorpusError("a vocabulary is required to yield token-id documents")
        for lineno, text in self.lines():
            ids = encode(text, self.vocab, self.lowercase, self.max_len)
            if ids:
                yield Document(id=str(lineno), tokens=tuple(ids))


def load_corpus(path, vocab: Vocab, lowercase: bool = True, max_len: int | None = 512) -> CorpusReader:
    return CorpusReader(path, vocab, lowercase, max_len)


# ---------------------------------------------------------------------------
# tokenized-corpus cache: b"MFTOK" + uint32 version + uint64 count, then per
# sequence a varint length followed by varint ids.

_CACHE_MAGIC = b"MFTOK"
_CACHE_VERSION = 1


def _put_varint(out: bytearray, value: int) -> None:
    if value < 0:
        raise ValueError("varints encode non-negative integers only")
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return


def _get_varint(buf: bytes, pos: int) -> tuple[int, int]:
    shift = value = 0
    while True:
        if pos >= len(buf):
            raise CorpusError("truncated varint in token cache")
        byte = buf[pos]
        pos += 1
        value |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return value, pos
        shift += 7


def write_token_cache(path, sequences: Iterable[Iterable[int]]) -> int:
    body = bytearray()
    n = 0
    for seq in sequences:
        seq = list(seq)
        _put_varint(body, len(seq))
        for i in seq:
            _put_varint(body, int(i))
        n += 1
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC + struct.pack("<IQ", _CACHE_VERSION, n))
        fh.write(body)
    return n


def read_token_cache(path) -> list[list[int]]:
    buf = Path(path).read_bytes()
    if buf[:5] != _CACHE_MAGIC:
        raise CorpusError(f"{path}: not a token cache")
    version, n = struct.unpack_from("<IQ", buf, 5)
    if version != _CACHE_VERSION:
        raise CorpusError(f"{path}: unsupported token cache version {version}")
    pos = 5 + 12
    out = []
    for _ in range(n):
        length, pos = _get_varint(buf, pos)
        seq = []
        for _ in range(length):
            v, pos = _get_varint(buf, pos)
            seq.append(v)
        out.append(seq)
    return out
