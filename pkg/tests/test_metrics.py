import math
from itertools import permutations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from multiflow.metrics import (BLEU_SMOOTHING, EvalPair, bleu, distinct_n, evaluate, lcs_length, rouge_l,
                               rouge_n)

words = st.lists(st.sampled_from(list("abcdef")), min_size=1, max_size=10)


def test_hand_examples():
    assert abs(rouge_n(EvalPair("the cat sat", "the cat slept"), 1) - 2 / 3) <= 1e-10
    assert lcs_length("a b c d".split(), "a c b d".split()) == 3
    assert abs(rouge_l(EvalPair("a b c d", "a c b d")) - 0.75) <= 1e-10


def test_boundaries():
    assert rouge_n(EvalPair("x y", "z w"), 1) == 0.0
    assert rouge_n(EvalPair("", "a b"), 1) == 0.0
    assert rouge_l(EvalPair("", "a b")) == 0.0
    assert rouge_n(EvalPair("a", "a"), 2) == 1.0
    with pytest.raises(ValueError):
        rouge_n(EvalPair("a", "a"), 0)
    with pytest.raises(ValueError):
        EvalPair("a", [])


def test_lowercasing_and_multi_reference_max():
    assert rouge_n(EvalPair("The Cat", ["dog", "the cat"]), 1) == 1.0


@given(words)
def test_self_scores_one(x):
    assert rouge_n(EvalPair(x, [x]), 1) == rouge_n(EvalPair(x, [x]), 2) == rouge_l(EvalPair(x, [x])) == 1.0


@given(words, words)
def test_rouge1_permutation_invariant(h, r):
    shuffled = sorted(h)
    assert rouge_n(EvalPair(h, [r]), 1) == rouge_n(EvalPair(shuffled, [r]), 1)
    for s in (rouge_n(EvalPair(h, [r]), 2), rouge_l(EvalPair(h, [r]))):
        assert 0.0 <= s <= 1.0


def test_rouge_l_order_sensitive():
    ref = ["a b c d"]
    assert rouge_l(EvalPair("a b c d", ref)) == 1.0
    assert rouge_l(EvalPair("d c b a", ref)) < 1.0
    assert rouge_n(EvalPair("d c b a", ref), 1) == 1.0


# ---------------------------------------------------------------------------
# BLEU


def spreadsheet_bleu(rows, max_n=4):
    """Step-by-step corpus BLEU with explicit per-order tallies."""
    match = [0] * max_n
    total = [0] * max_n
    c = r = 0
    for hyp, refs in rows:
        h, rs = hyp.split(), [x.split() for x in refs]
        c += len(h)
        lens = sorted(len(x) for x in rs)
        r += min(lens, key=lambda L: (abs(L - len(h)), L))
        for n in range(1, max_n + 1):
            grams = [tuple(h[i:i + n]) for i in range(len(h) - n + 1)]
            for g in set(grams):
                ref_max = max(sum(1 for i in range(len(x) - n + 1) if tuple(x[i:i + n]) == g) for x in rs)
                match[n - 1] += min(grams.count(g), ref_max)
            total[n - 1] += len(grams)
    precisions = [match[0] / total[0]] + [(match[k] + 1) / (total[k] + 1) for k in range(1, max_n)]
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * math.exp(sum(math.log(p) for p in precisions) / max_n)


FIXTURE = [
    ("the cat sat on the mat", ["the cat sat on a mat", "a cat was on the mat"]),
    ("a dog barked", ["the dog barked loudly"]),
    ("it rained all day long", ["it rained all day"]),
]


def test_bleu_fixture_matches_oracle():
    pairs = [EvalPair(h, r) for h, r in FIXTURE]
    assert abs(bleu(pairs) - spreadsheet_bleu(FIXTURE)) <= 1e-10
    assert abs(bleu(pairs[::-1]) - bleu(pairs)) <= 1e-15


def test_bleu_perfect_and_brevity():
    assert bleu([EvalPair("a b c d e", "a b c d e")]) == 1.0
    short = bleu([EvalPair("a b c d", "a b c d e f")])
    assert abs(short - math.exp(1 - 6 / 4)) <= 1e-12
    assert bleu([EvalPair("", "a b")]) == 0.0
    assert "add-one" in BLEU_SMOOTHING


# ---------------------------------------------------------------------------
# distinct


def test_distinct_examples():
    assert distinct_n(["a", "a", "a"], 1) == 1 / 3
    assert distinct_n(["a b", "c d"], 1) == 1.0
    assert distinct_n(["", ""], 2) == 0.0
    hyps = ["a b a", "b a c", "c c", "a", "b a b"]
    for n in (1, 2):
        grams = [tuple(h.split()[i:i + n]) for h in hyps for i in range(len(h.split()) - n + 1)]
        assert distinct_n(hyps, n) == len(set(grams)) / len(grams)


def test_evaluate_report():
    pairs = [EvalPair(h, r) for h, r in FIXTURE] + [EvalPair("", "x y")]
    rep = evaluate(pairs)
    assert rep.count == 4
    assert all(0.0 <= v <= 1.0 for v in rep.corpus.values())
    assert abs(rep.corpus["rouge-1"] - sum(rouge_n(p, 1) for p in pairs) / 4) <= 1e-12
    assert rep.to_text().splitlines()[0].startswith("# bleu smoothing")
    assert rep.per_pair_tsv().splitlines()[0] == "index\trouge-1\trouge-2\trouge-l"
    with pytest.raises(ValueError):
        evaluate(pairs, ["meteor"])
    same = evaluate([EvalPair(h, [h]) for h, _ in FIXTURE], ["rouge-1", "rouge-2", "rouge-l", "bleu-4"])
    assert all(v == 1.0 for v in same.corpus.values())


def test_bleu_invariant_under_reordering():
    pairs = [EvalPair(h, r) for h, r in FIXTURE]
    values = {round(bleu(list(p)), 14) for p in permutations(pairs)}
    assert len(values) == 1
