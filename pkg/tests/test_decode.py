import itertools
import math
from types import SimpleNamespace

import numpy as np
import pytest

from helpers import tiny_config
from multiflow.data import TrainingExample, collate
from multiflow.decode import DecodeConfig, DecodeState, Hypothesis, beam_decode, decode, greedy_decode, step
from multiflow.model import MultiFlowModel
from multiflow.text import EOS


def random_model_and_source(seed, **kw):
    model = MultiFlowModel(tiny_config(**kw), seed=seed)
    rng = np.random.default_rng(seed)
    src = rng.integers(6, model.config.vocab_size, size=rng.integers(1, 8)).tolist()
    return model, src


def training_row(model, source, prefix):
    """Word-flow log-probabilities at slot |prefix| of a training-style forward pass."""
    tgt = list(prefix) + [6]
    e = TrainingExample(s_prime=source, t_clean=tgt, t_noised=tgt, span_boundaries=list(range(len(tgt))))
    word, = model.forward_multiflow(collate([e]), flows=("word",))
    z = word.data[0, len(prefix)]
    z = z - z.max()
    return z - math.log(np.exp(z).sum())


class TableModel:
    """Stand-in model whose next-token log-probabilities come from a lookup table."""

    def __init__(self, table, vocab):
        self.table = table
        self.vocab = vocab
        self.config = SimpleNamespace(max_positions=64)

    def next_token_logits(self, source, prefix):
        return self.table(tuple(prefix))


def random_table(seed, vocab):
    cache = {}

    def table(prefix):
        if prefix not in cache:
            rng = np.random.default_rng([seed, len(prefix)] + list(prefix))
            p = rng.dirichlet(np.ones(vocab))
            cache[prefix] = np.log(p)
        return cache[prefix]
    return table


# ---------------------------------------------------------------------------
# step


def test_step_is_normalized_and_matches_training_row():
    model, src = random_model_and_source(0)
    for prefix in ([], [7], [7, 9, 11]):
        lp = step(model, src, prefix)
        assert abs(np.exp(lp).sum() - 1.0) <= 1e-12
        assert np.max(np.abs(lp - training_row(model, src, prefix))) <= 1e-10


def test_step_overflow():
    model = MultiFlowModel(tiny_config(max_positions=6), seed=0)
    with pytest.raises(ValueError):
        step(model, [6, 7, 8], [9, 10, 11])


def test_decode_equivalence_on_random_models():
    for seed in range(50):
        model, src = random_model_and_source(seed)
        cfg = DecodeConfig(max_length=8)
        cached = greedy_decode(model, src, cfg, incremental=True)
        assert cached == greedy_decode(model, src, cfg, incremental=False)
        state = DecodeState(model, src)
        for k in range(len(cached) + 1):
            prefix = cached[:k]
            row = training_row(model, src, prefix)
            assert np.max(np.abs(state.logprobs() - row)) <= 1e-10
            assert np.max(np.abs(step(model, src, prefix) - row)) <= 1e-10
            if k < len(cached):
                state.append(cached[k])


def test_state_copy_is_independent():
    model, src = random_model_and_source(1)
    a = DecodeState(model, src)
    before = a.logprobs()
    b = a.copy()
    b.append(7)
    assert np.array_equal(a.logprobs(), before)
    assert np.max(np.abs(b.logprobs() - step(model, src, [7]))) <= 1e-10


# ---------------------------------------------------------------------------
# greedy


def eos_model():
    model = MultiFlowModel(tiny_config(), seed=0)
    model.params["out_bias"].data[EOS] = 100.0
    return model


def test_end_peaked_model_gives_empty_output():
    assert greedy_decode(eos_model(), [6, 7], DecodeConfig()) == []
    assert decode(eos_model(), [6, 7], DecodeConfig(beam_size=3)) == []


def test_min_length_suppresses_end():
    out = greedy_decode(eos_model(), [6, 7], DecodeConfig(min_length=2, max_length=5))
    assert len(out) == 2 and EOS not in out


def test_max_length_cutoff():
    model = MultiFlowModel(tiny_config(), seed=0)
    model.params["out_bias"].data[9] = 100.0
    assert greedy_decode(model, [6, 7], DecodeConfig(max_length=3)) == [9, 9, 9]


def test_greedy_ties_prefer_smaller_id():
    table = lambda prefix: np.log(np.array([0.1, 0.1, 0.0, 0.4, 0.4]) + 1e-300) if not prefix \
        else np.log(np.array([0.0, 0.0, 1.0, 0.0, 0.0]) + 1e-300)
    assert greedy_decode(TableModel(table, 5), [], DecodeConfig(), incremental=False) == [3]


# ---------------------------------------------------------------------------
# beam


def test_beam_one_equals_greedy_on_random_models():
    for seed in range(50):
        model, src = random_model_and_source(seed)
        cfg = DecodeConfig(max_length=6, beam_size=1)
        assert beam_decode(model, src, cfg)[0].surface == greedy_decode(model, src, cfg)


def enumerate_best(table, vocab, max_len, alpha):
    best = None
    for length in range(1, max_len + 1):
        for seq in itertools.product(range(vocab), repeat=length):
            if EOS in seq[:-1] or (seq[-1] != EOS and length < max_len):
                continue
            lp = sum(table(seq[:k])[seq[k]] for k in range(length))
            key = (-lp / length ** alpha, seq)
            best = key if best is None or key < best else best
    return best


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("alpha", [0.0, 1.0])
def test_exhaustive_beam_finds_global_best(seed, alpha):
    vocab, max_len = 4, 3
    table = random_table(seed, vocab)
    hyps = beam_decode(TableModel(table, vocab), [], DecodeConfig(max_length=max_len, beam_size=vocab ** max_len,
                                                                  length_penalty=alpha), incremental=False)
    neg_score, seq = enumerate_best(table, vocab, max_len, alpha)
    assert hyps[0].tokens == seq
    assert abs(hyps[0].score(alpha) + neg_score) <= 1e-12


def test_two_step_table_against_enumeration():
    model = MultiFlowModel(tiny_config(vocab_size=8), seed=4)
    table = lambda prefix: step(model, [6, 7], list(prefix))
    hyps = beam_decode(model, [6, 7], DecodeConfig(max_length=2, beam_size=64), incremental=False)
    _, seq = enumerate_best(table, 8, 2, 0.0)
    assert hyps[0].tokens == seq


def test_length_penalty_favours_longer_hypotheses_when_large():
    # [EOS] alone: log 0.4; [3, EOS]: log 0.6 + log 0.55 < log 0.4
    def table(prefix):
        if not prefix:
            return np.log(np.array([1e-9, 1e-9, 0.4, 0.6 - 2e-9]))
        return np.log(np.array([1e-9, 1e-9, 0.55, 0.45 - 2e-9]))
    short = Hypothesis((EOS,), math.log(0.4), finished=True)
    long = Hypothesis((3, EOS), math.log(0.6) + math.log(0.55), finished=True)
    assert short.score(0.0) > long.score(0.0)
    assert long.score(1.0) > short.score(1.0)
    model = TableModel(table, 4)
    pick = lambda a: decode(model, [], DecodeConfig(max_length=2, beam_size=4, length_penalty=a), incremental=False)
    assert pick(0.0) == [] and pick(1.0) == [3]


def test_scores_finite_and_sorted():
    model, src = random_model_and_source(5)
    hyps = beam_decode(model, src, DecodeConfig(max_length=5, beam_size=3, length_penalty=0.6))
    scores = [h.score(0.6) for h in hyps]
    assert all(math.isfinite(s) for s in scores) and scores == sorted(scores, reverse=True)
    assert all(h.finished and (h.tokens[-1] == EOS or len(h.tokens) == 5) for h in hyps)


def test_cached_and_recomputed_beams_agree():
    for seed in range(5):
        model, src = random_model_and_source(seed)
        cfg = DecodeConfig(max_length=5, beam_size=3, length_penalty=1.0)
        a = [(h.tokens, h.logprob) for h in beam_decode(model, src, cfg)]
        b = [(h.tokens, h.logprob) for h in beam_decode(model, src, cfg, incremental=False)]
        assert [t for t, _ in a] == [t for t, _ in b]
        assert np.allclose([l for _, l in a], [l for _, l in b], atol=1e-10, rtol=0)


def test_config_validation():
    with pytest.raises(ValueError):
        DecodeConfig(beam_size=0)
    with pytest.raises(ValueError):
        DecodeConfig(max_length=0)
