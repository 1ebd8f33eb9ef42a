import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from multiflow.data import (FragmentSamplingConfig, NoiseConfig, TrainingExample, apply_noise, assemble_example,
                            assemble_pair, batch, collate, dump_examples_text, example_rng, load_examples,
                            mask_targets, padded_cost, reconstruct_source, sample_fragments, save_examples)
from multiflow.spans import build_span_vocab, count_ngrams
from multiflow.text import EOS, MASK, NUM_RESERVED, PAD

V = 40
NOISE = NoiseConfig(rate=0.3, vocab_size=V)
FRAG = FragmentSamplingConfig()


def span_vocab():
    rng = np.random.default_rng(0)
    return build_span_vocab(count_ngrams([rng.integers(6, V, size=30).tolist() for _ in range(20)]), 20, 10)


def three_sigma(p, n):
    return 3 * math.sqrt(p * (1 - p) / n)


# ---------------------------------------------------------------------------
# fragment sampling


@given(st.integers(2, 200), st.integers(0, 2**31 - 1))
def test_fragments_spend_budget_without_overlap(n, seed):
    s = np.arange(n) + 100
    frag = sample_fragments(s, FRAG, np.random.default_rng(seed))
    budget = max(1, math.floor(0.25 * n))
    assert len(frag.t_clean) == budget
    covered = np.zeros(n, int)
    for start, length in frag.fragment_spans:
        covered[start:start + length] += 1
    assert covered.max() == 1
    starts = [a for a, _ in frag.fragment_spans]
    assert starts == sorted(starts)
    # T is ordered by original position and S' keeps the rest in order
    assert frag.t_clean.tolist() == sorted(frag.t_clean.tolist())
    assert frag.s_prime.tolist() == [v for v, c in zip(s, covered) if not c]
    assert reconstruct_source(frag.s_prime, frag.t_clean, frag.fragment_spans) == s.tolist()


def test_fragment_lengths_follow_chosen_distribution():
    rng = np.random.default_rng(0)
    for _ in range(200):
        frag = sample_fragments(np.arange(512), FRAG, rng)
        low, high, _ = FRAG.distributions[frag.dist_index]
        lengths = [l for _, l in frag.fragment_spans]
        # every fragment but a clipped last one lies inside the distribution's support
        assert sum(low <= l <= high for l in lengths) >= len(lengths) - 1


def test_fragment_errors():
    with pytest.raises(ValueError):
        sample_fragments([7], FRAG, np.random.default_rng(0))
    with pytest.raises(ValueError):
        FragmentSamplingConfig(gamma=1.5)
    with pytest.raises(ValueError):
        FragmentSamplingConfig(distributions=((1, 4, 0.5), (4, 32, 0.6)))


def test_default_hyperparameters():
    assert FRAG.gamma == 0.25
    assert FRAG.distributions == ((1, 4, 0.4), (4, 32, 0.6))
    assert NoiseConfig().rate == 0.05


# ---------------------------------------------------------------------------
# corruption


def test_zero_rate_is_identity():
    t = np.arange(6, 30)
    out, replaced = apply_noise(t, NoiseConfig(0.0, V), np.random.default_rng(0))
    assert np.array_equal(out, t) and not replaced.any()


def test_full_rate_uses_regular_ids_only():
    t = np.full(5000, 7)
    out, replaced = apply_noise(t, NoiseConfig(1.0, V), np.random.default_rng(0))
    assert replaced.all()
    assert out.min() >= NUM_RESERVED and out.max() < V
    counts = np.bincount(out, minlength=V)[NUM_RESERVED:]
    expected = 5000 / (V - NUM_RESERVED)
    assert np.all(np.abs(counts - expected) < 5 * math.sqrt(expected))


@pytest.mark.parametrize("rate", [0.05, 0.5, 0.7])
def test_replacement_rate_binomial(rate):
    n = 20000
    _, replaced = apply_noise(np.full(n, 9), NoiseConfig(rate, V), np.random.default_rng(1))
    assert abs(replaced.mean() - rate) <= three_sigma(rate, n)


def test_masking_cardinality_binomial():
    sv = span_vocab()
    rng = np.random.default_rng(2)
    total = masked = 0
    for _ in range(400):
        t = rng.integers(6, V, size=rng.integers(1, 20)).tolist()
        e = assemble_pair([8, 9], t, sv, NOISE, rng, mode="masking", mask_prob=0.7)
        assert np.array_equal(e.loss_mask, e.t_noised == MASK)
        assert np.array_equal(e.t_noised[~e.loss_mask], e.t_clean[~e.loss_mask])
        total += e.tgt_len
        masked += int(e.loss_mask.sum())
    assert abs(masked / total - 0.7) <= three_sigma(0.7, total)


def test_mask_targets():
    out, m = mask_targets([6, 7, 8], 1.0, np.random.default_rng(0))
    assert out.tolist() == [MASK] * 3 and m.all()


# ---------------------------------------------------------------------------
# assembly


def test_assemble_example_layout():
    sv = span_vocab()
    rng = example_rng(0, 3)
    s = np.random.default_rng(4).integers(6, V, size=40)
    e = assemble_example(s, sv, FRAG, NOISE, rng)
    n, m = e.src_len, e.tgt_len
    assert n + m == 40 and m == 10
    assert e.positions.tolist() == list(range(n + m))
    assert e.segments.tolist() == [0] * n + [1] * m
    assert e.attn_positions.tolist() == list(range(n, n + m))
    assert e.span_boundaries[0] == 0
    assert np.array_equal(e.t_noised[~e.noised], e.t_clean[~e.noised])
    assert e.loss_mask.all()
    assert e.num_tokens == n + 3 * m


def test_assemble_pair_appends_end_and_scores_all():
    e = assemble_pair([6, 7], [8, 9], span_vocab(), NoiseConfig(0.0, V), np.random.default_rng(0))
    assert e.t_clean.tolist() == [8, 9, EOS] and e.t_noised.tolist() == [8, 9, EOS]
    assert e.loss_mask.all()
    with pytest.raises(ValueError):
        assemble_pair([6], [], span_vocab(), NOISE, np.random.default_rng(0), append_eos=False)
    with pytest.raises(ValueError):
        assemble_pair([6], [7], span_vocab(), NOISE, np.random.default_rng(0), mode="other")


def test_example_rng_streams():
    a = example_rng(1, 2, 3).random(4)
    assert np.array_equal(a, example_rng(1, 2, 3).random(4))
    assert not np.array_equal(a, example_rng(1, 2, 4).random(4))


# ---------------------------------------------------------------------------
# batching


def make_examples(k, seed=0):
    sv = span_vocab()
    rng = np.random.default_rng(seed)
    out = []
    for i in range(k):
        s = rng.integers(6, V, size=rng.integers(1, 10)).tolist()
        t = rng.integers(6, V, size=rng.integers(0, 8)).tolist()
        out.append(assemble_pair(s, t, sv, NOISE, example_rng(seed, i)))
    return out


def test_collate_pads():
    ex = make_examples(5)
    b = collate(ex)
    N = max(e.src_len + e.tgt_len for e in ex)
    M = max(e.tgt_len for e in ex)
    assert b.x_ids.shape == (5, N) and b.targets.shape == (5, M)
    for i, e in enumerate(ex):
        n, m = e.src_len, e.tgt_len
        assert np.all(b.x_ids[i, n + m:] == PAD)
        assert not b.loss_mask[i, m:].any()
        assert b.x_ids[i, :n].tolist() == e.s_prime.tolist()
        assert b.x_ids[i, n:n + m].tolist() == e.t_noised.tolist()
    with pytest.raises(ValueError):
        collate([])


@given(st.integers(40, 400))
def test_batch_respects_budget_and_order(max_tokens):
    ex = make_examples(30, seed=1)
    if max(padded_cost([e]) for e in ex) > max_tokens:
        with pytest.raises(ValueError):
            batch(ex, max_tokens)
        return
    batches = batch(ex, max_tokens)
    assert all(padded_cost(b.examples) <= max_tokens for b in batches)
    assert [e for b in batches for e in b.examples] == ex


def test_example_cache_round_trip(tmp_path):
    sv = span_vocab()
    ex = [assemble_example(np.arange(6, 30), sv, FRAG, NOISE, example_rng(0, i)) for i in range(5)]
    ex += make_examples(3)
    assert save_examples(tmp_path / "e.bin", ex) == 8
    back = load_examples(tmp_path / "e.bin")
    for a, b in zip(ex, back):
        for name in ("s_prime", "t_clean", "t_noised", "noised", "loss_mask"):
            assert np.array_equal(getattr(a, name), getattr(b, name))
        assert list(a.span_boundaries) == list(b.span_boundaries)
        assert [tuple(x) for x in a.fragment_spans] == b.fragment_spans and a.dist_index == b.dist_index
    dump_examples_text(tmp_path / "e.jsonl", ex[:2])
    rows = [json.loads(l) for l in (tmp_path / "e.jsonl").read_text().splitlines()]
    assert rows[0]["t_clean"] == ex[0].t_clean.tolist()
    assert rows[0]["attn_positions"] == ex[0].attn_positions.tolist()


def test_training_example_validation():
    with pytest.raises(ValueError):
        TrainingExample(s_prime=[6], t_clean=[7, 8], t_noised=[7], span_boundaries=[0])
