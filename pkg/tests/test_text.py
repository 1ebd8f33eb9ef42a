from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from multiflow.text import (ATTN, EOS, MASK, PAD, RESERVED, UNK, CorpusError, Document, Vocab, build_vocab, decode,
                            encode, load_corpus, read_token_cache, write_token_cache)


def test_reserved_ids_fixed():
    v = Vocab()
    assert [v.lookup(t) for t in RESERVED] == [0, 1, 2, 3, 4, 5]
    assert (PAD, EOS, UNK, ATTN, MASK) == (0, 2, 3, 4, 5)


def test_frequency_order():
    v = build_vocab(["a a b"], min_count=1)
    assert "a" in v and "b" in v
    assert v.lookup("a") < v.lookup("b")
    assert len(v) == len(RESERVED) + 2


def test_min_count_maps_rare_to_unk():
    v = build_vocab(["a a b"], min_count=2)
    assert "b" not in v
    assert encode("a b", v) == [v.lookup("a"), UNK]


def test_ties_are_lexicographic_and_max_size():
    v = build_vocab(["c b a", "b a", "d"], max_size=3)
    assert v.itos[len(RESERVED):] == ["a", "b", "c"]


def test_synthetic_corpus_matches_counter_oracle():
    rng = np.random.default_rng(0)
    words = [f"w{i}" for i in range(300)]
    lines = [" ".join(rng.choice(words, size=rng.integers(1, 12))) for _ in range(1000)]
    v = build_vocab(lines, min_count=3)
    counts = Counter(t for line in lines for t in line.split())
    expected = sorted((t for t, c in counts.items() if c >= 3), key=lambda t: (-counts[t], t))
    assert v.itos[len(RESERVED):] == expected


def test_empty_corpus_rejected():
    with pytest.raises(CorpusError):
        build_vocab([])


def test_encode_lowercases_and_truncates():
    v = build_vocab(["hello world"])
    assert encode("Hello WORLD", v) == [v.lookup("hello"), v.lookup("world")]
    assert encode("Hello", v, lowercase=False) == [UNK]
    assert len(encode(" ".join(["hello"] * 600), v)) == 512
    assert len(encode(" ".join(["hello"] * 10), v, max_len=4)) == 4


@given(st.lists(st.sampled_from(["x", "y", "zz", "q"]), min_size=0, max_size=20))
def test_round_trip(tokens):
    v = build_vocab(["x y zz q"])
    text = " ".join(tokens)
    assert decode(encode(text, v), v) == text


def test_vocab_file_round_trip(tmp_path):
    v = build_vocab(["the cat the dog"])
    v.save(tmp_path / "v.txt")
    assert Vocab.load(tmp_path / "v.txt") == v
    (tmp_path / "bad.txt").write_text("a\nb\n")
    with pytest.raises(CorpusError):
        Vocab.load(tmp_path / "bad.txt")


def test_corpus_reader_skips_bad_utf8(tmp_path):
    path = tmp_path / "c.txt"
    path.write_bytes(b"a b\n\xff\xfe broken\n\nb c\n")
    v = build_vocab(["a b c"])
    reader = load_corpus(path, v)
    docs = list(reader)
    assert [d.tokens for d in docs] == [tuple(encode("a b", v)), tuple(encode("b c", v))]
    assert reader.warnings == 1
    assert isinstance(docs[0], Document) and docs[0].id == "0"


def test_missing_corpus(tmp_path):
    with pytest.raises(CorpusError):
        list(load_corpus(tmp_path / "nope.txt", Vocab()))


@given(st.lists(st.lists(st.integers(0, 2**40), max_size=8), max_size=6))
def test_token_cache_round_trip(tmp_path_factory, seqs):
    path = tmp_path_factory.mktemp("cache") / "t.bin"
    assert write_token_cache(path, seqs) == len(seqs)
    assert read_token_cache(path) == seqs
