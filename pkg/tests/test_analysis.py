import numpy as np
import pytest

from helpers import tiny_config
from multiflow.analysis import HEADER, UNDEFINED, analyze_attention, attention_split, format_report
from multiflow.data import NoiseConfig, assemble_pair, collate
from multiflow.model import MultiFlowModel
from multiflow.spans import build_span_vocab, count_ngrams
from multiflow.tasks import copy_pairs

PAIRS = copy_pairs(30, vocab_size=24, max_len=8, seed=1)
SV = build_span_vocab(count_ngrams([t for _, t in PAIRS]), 10, 5)


def test_split_hand_example():
    # one example, n=1, m=2, one head; query 1 sees s0, t0 (noised) and itself
    probs = np.zeros((1, 1, 2, 5))
    probs[0, 0, 0] = [0.6, 0, 0, 0.4, 0]
    probs[0, 0, 1] = [0.5, 0.2, 0, 0, 0.3]
    out = attention_split(probs, np.array([1]), np.array([2]), np.array([[True, False]]))
    assert out["source"].tolist() == [0.6, 0.5]
    assert out["noised"].tolist() == [0.0, 0.2] and out["unnoised"].tolist() == [0.0, 0.0]
    assert out["self"].tolist() == [0.4, 0.3]
    assert out["n_noised"].tolist() == [0, 1]


def test_columns_partition_each_query():
    model = MultiFlowModel(tiny_config(), seed=0)
    rng = np.random.default_rng(0)
    ex = [assemble_pair(s, t, SV, NoiseConfig(0.5, 24), rng) for s, t in PAIRS[:8]]
    b = collate(ex)
    _, run = model.forward_multiflow(b, flows=("word",), record_attention=True)
    out = attention_split(run["attention"], b.src_len, b.tgt_len, b.noised)
    total = out["source"] + out["unnoised"] + out["noised"] + out["self"]
    assert np.max(np.abs(total - 1.0)) <= 1e-12
    assert len(total) == sum(e.tgt_len for e in ex)


def test_report_rows():
    model = MultiFlowModel(tiny_config(), seed=0)
    rows = analyze_attention(model, PAIRS, [0.0, 0.5], SV, num_examples=40, batch_size=16)
    zero, half = rows
    assert zero.noised is None and zero.cells()[3] == UNDEFINED
    assert half.noised is not None
    for r in rows:
        assert abs(r.source + r.unnoised + (r.noised or 0.0) + r.self_weight - 1.0) <= 1e-12
        assert r.examples == 40
    text = format_report(rows).splitlines()
    assert text[0].split("\t") == HEADER and len(text) == 3
    with pytest.raises(ValueError):
        analyze_attention(model, [], [0.5], SV)
