import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxst.evaluate import (TagScore, corpus_bleu, format_report, paired_bootstrap, parse_report,
                            pos_f1, relative_improvement, token_accuracy)


def test_identity_is_100():
    refs = [["a", "b", "c", "d", "e"], ["x", "y", "z", "w"]]
    assert corpus_bleu(refs, refs).bleu == 100.0


def test_brevity_example():
    r = corpus_bleu([["a", "b", "c", "d"]], [["a", "b", "c", "d", "e"]])
    assert r.ngram_precisions == [1.0, 1.0, 1.0, 1.0]
    assert abs(r.brevity_penalty - math.exp(-0.25)) < 1e-15
    assert round(r.bleu, 4) == 77.8801
    assert f"{r.bleu:.2f}" == "77.88"


def test_disjoint_is_zero():
    assert corpus_bleu([["a", "b", "c", "d"]], [["w", "x", "y", "z"]]).bleu == 0.0


def test_empty_corpus_and_mismatch():
    with pytest.raises(ValueError):
        corpus_bleu([], [])
    with pytest.raises(ValueError):
        corpus_bleu([["a"]], [])


def _bleu_oracle(hyps, refs):
    """Straight transcription of the corpus BLEU-4 formula."""
    num, den = [0] * 4, [0] * 4
    c = r = 0
    for h, ref in zip(hyps, refs):
        c += len(h)
        r += len(ref)
        for n in range(1, 5):
            hg = Counter(tuple(h[i:i + n]) for i in range(len(h) - n + 1))
            rg = Counter(tuple(ref[i:i + n]) for i in range(len(ref) - n + 1))
            num[n - 1] += sum(min(v, rg[g]) for g, v in hg.items())
            den[n - 1] += max(0, len(h) - n + 1)
    if any(d == 0 or m == 0 for m, d in zip(num, den)):
        return 0.0
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return 100 * bp * math.exp(sum(math.log(m / d) for m, d in zip(num, den)) / 4)


sentences = st.lists(st.sampled_from("abcde"), min_size=0, max_size=9)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(sentences, sentences), min_size=1, max_size=6), st.randoms())
def test_bleu_matches_oracle_and_is_permutation_invariant(pairs, rnd):
    hyps, refs = [p[0] for p in pairs], [p[1] for p in pairs]
    b = corpus_bleu(hyps, refs).bleu
    assert abs(b - _bleu_oracle(hyps, refs)) < 1e-9
    rnd.shuffle(pairs)
    assert abs(corpus_bleu([p[0] for p in pairs], [p[1] for p in pairs]).bleu - b) < 1e-9
    assert (b == 100.0) == all(h == r for h, r in zip(hyps, refs)) or not any(len(r) >= 4 for r in refs)


def test_bootstrap_identical_systems():
    refs = [["a", "b", "c", "d", "e"]] * 10
    hyps = [["a", "b", "x", "d", "e"]] * 10
    res = paired_bootstrap(hyps, hyps, refs, n_resamples=200, seed=3)
    assert res.p_value == 1.0 and res.delta_bleu == 0.0


def test_bootstrap_all_win():
    refs = [[f"w{i}", "b", "c", "d", "e"] for i in range(20)]
    bad = [["z", "z", "z"] for _ in refs]
    res = paired_bootstrap(refs, bad, refs, n_resamples=500, seed=0)
    assert res.p_value == 1 / 501
    assert res.delta_bleu == 100.0


def test_bootstrap_deterministic_and_errors():
    rng = np.random.default_rng(0)
    refs = [list(rng.choice(list("abcdef"), 6)) for _ in range(15)]
    a = [r[:5] + ["a"] for r in refs]
    b = [r[:3] + ["q", "q", "q"] for r in refs]
    assert paired_bootstrap(a, b, refs, 100, seed=4) == paired_bootstrap(a, b, refs, 100, seed=4)
    with pytest.raises(ValueError):
        paired_bootstrap(a, b[:-1], refs)
    with pytest.raises(ValueError):
        paired_bootstrap(a[:1], b[:1], refs[:1])


def test_bootstrap_ladder_monotone():
    rng = np.random.default_rng(1)
    refs = [list(rng.choice(list("abcdefgh"), 8)) for _ in range(30)]
    b = [r[:4] + ["x"] * 4 for r in refs]
    ps = []
    for good in range(0, 31, 5):
        a = [r if i < good else r[:4] + ["y"] * 4 for i, r in enumerate(refs)]
        ps.append(paired_bootstrap(a, b, refs, 300, seed=2).p_value)
    assert all(x >= y for x, y in zip(ps, ps[1:]))


LEX = {"he": "PRON", "she": "PRON", "bank": "NOUN", "shore": "NOUN", "run": "VERB", "Ana": "PROPN", ".": "PUNCT"}


def _pos_oracle(hyps, refs, lex):
    tags = {}
    for h, r in zip(hyps, refs):
        for t in set(h) | set(r):
            tag = lex.get(t, "X")
            m, hn, rn = tags.get(tag, (0, 0, 0))
            tags[tag] = (m + min(h.count(t), r.count(t)), hn + h.count(t), rn + r.count(t))
    return tags


def test_pos_f1_hand_case():
    hyps = [["she", "run", "bank", "."], ["he", "he", "Ana"], ["shore", "."]]
    refs = [["he", "run", "bank", "."], ["he", "Ana", "."], ["bank", "."]]
    t = pos_f1(hyps, refs, LEX)
    assert (t["PRON"].matches, t["PRON"].hyp_count, t["PRON"].support) == (1, 3, 2)
    assert abs(t["PRON"].precision - 1 / 3) < 1e-15 and t["PRON"].recall == 0.5
    assert abs(t["PRON"].f1 - 0.4) < 1e-15
    assert t["PUNCT"].recall == 2 / 3 and t["PUNCT"].precision == 1.0
    assert t["NOUN"].precision == 0.5 and t["NOUN"].recall == 0.5


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.lists(st.sampled_from(sorted(LEX) + ["zz"]), max_size=6),
                          st.lists(st.sampled_from(sorted(LEX) + ["zz"]), max_size=6)), min_size=1, max_size=5))
def test_pos_f1_counting_oracle(pairs):
    hyps, refs = [p[0] for p in pairs], [p[1] for p in pairs]
    got = pos_f1(hyps, refs, LEX)
    want = _pos_oracle(hyps, refs, LEX)
    assert set(got) == set(want)
    for tag, (m, hn, rn) in want.items():
        s = got[tag]
        assert (s.matches, s.hyp_count, s.support) == (m, hn, rn)
        if s.precision + s.recall > 0:
            assert abs(s.f1 - 2 * s.precision * s.recall / (s.precision + s.recall)) < 1e-12
    total_m = sum(s.matches for s in got.values())
    assert total_m <= min(sum(map(len, hyps)), sum(map(len, refs)))


def test_pos_identity_all_ones():
    refs = [["he", "run", "."], ["Ana", "bank"]]
    assert all(s.f1 == 1.0 for s in pos_f1(refs, refs, LEX).values())


def test_pron_without_reference_support():
    t = pos_f1([["he", "run"]], [["run"]], LEX)
    assert t["PRON"].support == 0 and t["PRON"].precision == 0.0
    assert relative_improvement(t, t) == [("VERB", 0.0)]


def test_relative_improvement_arithmetic():
    base = {"NOUN": TagScore(0.5, 0.5, 0.5, 10), "PRON": TagScore(0, 0, 0.0, 4), "X": TagScore(0, 0, 0, 0)}
    ctx = {"NOUN": TagScore(0.6, 0.6, 0.6, 10), "PRON": TagScore(0, 0, 0.5, 4), "X": TagScore(0, 0, 1.0, 0)}
    out = relative_improvement(ctx, base)
    assert out[0][0] == "PRON" and abs(out[0][1] - 0.5 / 1e-6) < 1e-3
    assert out[1][0] == "NOUN" and abs(out[1][1] - 0.2) < 1e-12
    assert "X" not in dict(out)
    same = relative_improvement(base, base)
    assert all(g == 0.0 for _, g in same)


def test_token_accuracy():
    groups = [("bank", "shore"), ("he", "she")]
    hyps = [["he", "bank"], ["she", "shore"]]
    refs = [["she", "bank"], ["she", "bank"]]
    assert token_accuracy(hyps, refs, groups) == 0.5
    assert token_accuracy([["a"]], [["a"]], groups) is None


def test_report_round_trip():
    r = corpus_bleu([["a", "b", "c", "d"]], [["a", "b", "c", "d", "e"]])
    sig = paired_bootstrap([["a", "b"]] * 3, [["a", "b"]] * 3, [["a", "b"]] * 3, 10)
    text = format_report(r, sig, {"a": {"NOUN": TagScore(1.0, 0.5, 2 / 3, 4)}}, [("NOUN", 0.25)])
    parsed = parse_report(text)
    assert parsed["bleu"]["bleu"] == "77.8801"
    assert parsed["bootstrap"]["p_value"] == "1.0000"
    assert parsed["pos_f1"]["a.NOUN.f1"] == "0.6667"
    assert parsed["relative_improvement"] == {"rank_1": "NOUN", "gain_1": "0.2500"}
    assert text == format_report(r, sig, {"a": {"NOUN": TagScore(1.0, 0.5, 2 / 3, 4)}}, [("NOUN", 0.25)])
