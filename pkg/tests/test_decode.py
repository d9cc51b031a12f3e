import itertools

import numpy as np
import pytest

from ctxst.context import ContextConfig, assemble_context
from ctxst.corpus import GeneratorConfig, generate_synthetic
from ctxst.decode import (DecodeConfig, beam_search, decode_exact, decode_exact_corpus, decode_gold,
                          decode_isolated, decode_multistage, decode_random, encode_features, greedy_search,
                          next_log_probs, read_decode_output, write_decode_output)
from ctxst.model import ModelConfig, init_model
from ctxst.tokenizer import build_vocab
from ctxst.train import build_vocabs

MICRO = dict(asr_encoder_blocks=1, st_encoder_blocks=1, decoder_blocks=1, attention_dim=8, ff_dim=16,
             heads=2, dropout_rate=0.0)


def tiny_model(seed, n_tokens=3, scale=3.0):
    """Untrained micro model; embeddings scaled up so output distributions are peaky."""
    src = build_vocab([["s1", "s2"]], 100)
    tgt = build_vocab([[f"t{i}" for i in range(n_tokens)]], 100)
    m = init_model(ModelConfig(**MICRO, seed=seed), src, tgt, feature_dim=3)
    m.params["dec_st.out.w"].data *= scale
    return m


def enumerate_best(model, feats, ctx, max_len, beta):
    """Score every string a search could return and keep the best (ties: first found)."""
    h = encode_features(model, feats)
    v = model.tgt_vocab
    words = [i for i in range(len(v)) if not v.is_special(i)]
    best = None
    for n in range(max_len + 1):
        for ids in itertools.product(words, repeat=n):
            lp = 0.0
            for t in range(n):
                lp += next_log_probs(model, h, ctx, [list(ids[:t])])[0, ids[t]]
            if n < max_len:
                lp += next_log_probs(model, h, ctx, [list(ids)])[0, v.eos]
            score = lp + beta * n
            if best is None or score > best[0] + 1e-12:
                best = (score, list(ids))
    return best


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("beta", [0.0, 0.3])
def test_exhaustive_beam_matches_enumeration(seed, beta):
    m = tiny_model(seed)
    feats = np.random.default_rng(seed).normal(size=(8, 3))
    ctx = [m.tgt_vocab.spk_a, 7] if seed % 2 else []
    cfg = DecodeConfig(beam_size=64, length_penalty=beta)
    top = beam_search(m, feats, ctx, cfg, max_len=3)[0]
    score, ids = enumerate_best(m, feats, ctx, 3, beta)
    assert top.ids == ids
    assert abs(top.normalized_score - score) < 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_beam_one_equals_greedy(seed):
    m = tiny_model(seed, n_tokens=6, scale=1.0)
    feats = np.random.default_rng(100 + seed).normal(size=(12, 3))
    ctx = [m.tgt_vocab.spk_b, 8, m.tgt_vocab.sep]
    top = beam_search(m, feats, ctx, DecodeConfig(beam_size=1, length_penalty=0.0), max_len=6)
    assert len(top) == 1
    assert top[0].ids == greedy_search(m, feats, ctx, max_len=6)


def test_hypothesis_invariants_and_determinism():
    m = tiny_model(7, n_tokens=5)
    feats = np.random.default_rng(0).normal(size=(10, 3))
    cfg = DecodeConfig(beam_size=4, length_penalty=0.3)
    a = beam_search(m, feats, [], cfg, max_len=4)
    b = beam_search(m, feats, [], cfg, max_len=4)
    assert [(h.ids, h.log_prob) for h in a] == [(h.ids, h.log_prob) for h in b]
    for h in a:
        assert len(h.ids) <= 4
        assert h.normalized_score == h.log_prob + 0.3 * len(h.ids)
        assert not any(m.tgt_vocab.is_special(i) for i in h.ids)
    assert [h.normalized_score for h in a] == sorted((h.normalized_score for h in a), reverse=True)


@pytest.mark.parametrize("seed", range(6))
def test_exhaustive_beam_bounds_every_beam(seed):
    m = tiny_model(seed, n_tokens=4, scale=1.5)
    feats = np.random.default_rng(200 + seed).normal(size=(8, 3))
    best = beam_search(m, feats, [], DecodeConfig(beam_size=200, length_penalty=0.3), max_len=3)[0]
    for b in range(1, 9):
        top = beam_search(m, feats, [], DecodeConfig(beam_size=b, length_penalty=0.3), max_len=3)[0]
        assert top.normalized_score <= best.normalized_score + 1e-12


def test_wider_beam_can_lose_the_narrow_beams_path():
    # pruning search is not monotone in beam size: with beam 3 the extra
    # candidate's children crowd out the prefix that beam 2 completes
    m = tiny_model(10, n_tokens=4, scale=1.5)
    feats = np.random.default_rng(1010).normal(size=(8, 3))
    s = [beam_search(m, feats, [], DecodeConfig(beam_size=b, length_penalty=0.0), max_len=3)[0].normalized_score
         for b in (2, 3)]
    assert s[1] < s[0]


# ------------------------------------------------------------------ strategies

@pytest.fixture(scope="module")
def setup():
    convs = generate_synthetic(GeneratorConfig(n_conversations=3, utterances_per_conversation=4, seed=5))
    src, tgt = build_vocabs(convs)
    m = init_model(ModelConfig(**MICRO, seed=3), src, tgt, feature_dim=16)
    return m, convs, DecodeConfig(beam_size=2, max_len=4)


def _tokens(res):
    return {k: h.tokens for k, h in res.items()}


def test_parallel_equals_serial(setup):
    m, convs, cfg = setup
    assert _tokens(decode_isolated(m, convs, cfg, jobs=1)) == _tokens(decode_isolated(m, convs, cfg, jobs=3))
    ctx = ContextConfig(k=2)
    assert _tokens(decode_gold(m, convs, ctx, cfg, jobs=1)) == _tokens(decode_gold(m, convs, ctx, cfg, jobs=2))
    hyp = ContextConfig(k=2, source_mode="hyp")
    assert _tokens(decode_exact_corpus(m, convs, hyp, cfg, 1)) == _tokens(decode_exact_corpus(m, convs, hyp, cfg, 2))


def test_conversation_starts_agree(setup):
    m, convs, cfg = setup
    iso = decode_isolated(m, convs, cfg)
    hyp = ContextConfig(k=2, source_mode="hyp")
    others = [decode_gold(m, convs, ContextConfig(k=2), cfg), decode_exact_corpus(m, convs, hyp, cfg),
              decode_multistage(m, convs, hyp, cfg).final, decode_random(m, convs, ContextConfig(k=2), cfg, seed=1)]
    for c in convs:
        for res in others:
            assert res[(c.id, 0)].tokens == iso[(c.id, 0)].tokens


def test_k0_reduces_to_isolated(setup):
    m, convs, cfg = setup
    iso = _tokens(decode_isolated(m, convs, cfg))
    hyp0 = ContextConfig(k=0, source_mode="hyp")
    assert _tokens(decode_exact_corpus(m, convs, hyp0, cfg)) == iso
    assert _tokens(decode_multistage(m, convs, hyp0, cfg).final) == iso


def test_exact_requires_hyp_mode(setup):
    m, convs, cfg = setup
    with pytest.raises(ValueError):
        decode_exact(m, convs[0], ContextConfig(k=2), cfg)


def test_exact_feeds_forward_own_predictions(setup):
    m, convs, cfg = setup
    conv = convs[0]
    hyp = ContextConfig(k=2, source_mode="hyp")
    windows = {}
    out = decode_exact(m, conv, hyp, cfg, windows=windows)
    assert windows[(conv.id, 1)].entries == [(conv[0].speaker, out[(conv.id, 0)].tokens)]
    forced_windows = {}
    decode_exact(m, conv, hyp, cfg, forced={(conv.id, 0): ["hello", "there"]}, windows=forced_windows)
    assert forced_windows[(conv.id, 1)].entries == [(conv[0].speaker, ["hello", "there"])]
    assert forced_windows[(conv.id, 1)].rendered != windows[(conv.id, 1)].rendered


def test_exact_independent_of_other_conversations(setup):
    m, convs, cfg = setup
    hyp = ContextConfig(k=2, source_mode="hyp")
    alone = decode_exact_corpus(m, convs[1:2], hyp, cfg)
    together = decode_exact_corpus(m, convs, hyp, cfg)
    assert all(together[k].tokens == v.tokens for k, v in alone.items())


def test_multistage_uses_previous_stage_only(setup):
    m, convs, _ = setup
    cfg = DecodeConfig(beam_size=2, max_len=4, stages=2)
    hyp = ContextConfig(k=2, source_mode="hyp")
    res = decode_multistage(m, convs, hyp, cfg)
    assert len(res.stages) == 3 and res.final is res.stages[-1]
    assert _tokens(res.stages[0]) == _tokens(decode_isolated(m, convs, cfg))
    for s in (1, 2):
        prev = {k: h.tokens for k, h in res.stages[s - 1].items()}
        for (cid, i), w in res.windows[s].items():
            conv = next(c for c in convs if c.id == cid)
            expected = assemble_context(conv, i, hyp, hyp_store=prev)
            assert w.entries == expected.entries


def test_decode_output_round_trip(setup, tmp_path):
    m, convs, cfg = setup
    res = decode_isolated(m, convs, cfg)
    write_decode_output(tmp_path / "out.hyp", res)
    back = read_decode_output(tmp_path / "out.hyp")
    assert set(back) == set(res)
    for k, (score, toks) in back.items():
        assert toks == res[k].tokens and abs(score - res[k].normalized_score) < 1e-6
    first = (tmp_path / "out.hyp").read_text().splitlines()[0].split("\t")
    assert len(first) == 4


def test_decode_config_validation():
    for bad in (dict(beam_size=0), dict(max_len=0), dict(stages=0)):
        with pytest.raises(ValueError):
            DecodeConfig(**bad).validate()
    assert DecodeConfig().limit_for(5) == 18
