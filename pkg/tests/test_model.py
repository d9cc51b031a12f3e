import math
from dataclasses import replace

import numpy as np
import pytest

from ctxst import autodiff as ad
from ctxst.autodiff import Tensor, gradient_check
from ctxst.context import ContextConfig
from ctxst.corpus import GeneratorConfig, generate_synthetic
from ctxst.model import (Example, ModelConfig, combine_losses, compute_loss, decoder_forward, encode_asr,
                         encode_st, init_model, load_checkpoint, make_batch, save_checkpoint, st_prefix)
from ctxst.tokenizer import build_vocab
from ctxst.train import Adam, TrainingDiverged, derive_seed, noam_lr, train

MICRO = dict(asr_encoder_blocks=1, st_encoder_blocks=1, decoder_blocks=1, attention_dim=8, ff_dim=16,
             heads=2, dropout_rate=0.0)


def vocabs():
    src = build_vocab([["s1", "s2", "s3"]], 100)
    tgt = build_vocab([["t1", "t2", "t3", "t4"]], 100)
    return src, tgt


def micro_model(seed=0, **kw):
    src, tgt = vocabs()
    return init_model(ModelConfig(**{**MICRO, **kw, "seed": seed}), src, tgt, feature_dim=3)


def micro_batch(model, seed=0, ctx=True):
    rng = np.random.default_rng(seed)
    s, t = model.src_vocab.token_to_id, model.tgt_vocab.token_to_id
    tv = model.tgt_vocab
    exs = [Example(rng.normal(size=(8, 3)), [s["s1"], s["s2"]], [t["t1"], t["t3"]],
                   [tv.spk_a, t["t2"], tv.sep, tv.spk_b, t["t4"]] if ctx else []),
           Example(rng.normal(size=(12, 3)), [s["s3"], s["s1"], s["s2"]], [t["t2"], t["t4"], t["t1"]],
                   [tv.spk_b, t["t3"]] if ctx else [])]
    return make_batch(exs, model)


# ---------------------------------------------------------------------- shapes

def test_encoder_shapes():
    src, tgt = vocabs()
    m = init_model(ModelConfig(), src, tgt, feature_dim=5)
    x = np.random.default_rng(0).normal(size=(8, 5))
    h = encode_asr(x, m)
    assert h.shape == (4, 64)
    assert encode_asr(np.zeros((9, 5)), m).shape == (4, 64)
    hs = encode_st(h, m)
    assert hs.shape == h.shape and not np.allclose(hs.data, h.data)
    with pytest.raises(ValueError):
        encode_asr(np.zeros((3, 5)), m)


def test_encoder_is_permutation_sensitive():
    m = micro_model()
    x = np.random.default_rng(1).normal(size=(8, 3))
    perm = x[[2, 3, 0, 1, 6, 7, 4, 5]]
    a, b = encode_asr(x, m).data, encode_asr(perm, m).data
    assert not np.allclose(np.sort(a, axis=0), np.sort(b, axis=0))


def test_decoder_shape_and_vocab_errors():
    m = micro_model()
    h = encode_st(encode_asr(np.random.default_rng(0).normal(size=(8, 3)), m), m)
    assert decoder_forward(h, [1, 7, 8, 9, 10, 7, 8], m, "st").shape == (7, len(m.tgt_vocab))
    assert decoder_forward(h, [1], m, "asr").shape == (1, len(m.src_vocab))
    with pytest.raises(IndexError):
        decoder_forward(h, [1, len(m.tgt_vocab)], m, "st")
    with pytest.raises(ValueError):
        decoder_forward(h, [], m, "st")


@pytest.mark.parametrize("which", ["asr", "st"])
def test_decoder_causality(which):
    m = micro_model(seed=3)
    h = encode_st(encode_asr(np.random.default_rng(2).normal(size=(10, 3)), m), m)
    V = len(m.src_vocab if which == "asr" else m.tgt_vocab)
    rng = np.random.default_rng(4)
    prefix = list(rng.integers(0, V, 6))
    base = decoder_forward(h, prefix, m, which).data
    for i in range(6):
        other = prefix[:i + 1] + list(rng.integers(0, V, 5 - i))
        alt = decoder_forward(h, other, m, which).data
        assert alt[: i + 1].tobytes() == base[: i + 1].tobytes()


def test_st_prefix_layout():
    m = micro_model()
    ids, pos, start, sos_at = st_prefix([4, 7], [8, 9], m)
    assert ids == [4, 7, m.tgt_vocab.sos, 8, 9] and pos == [0, 1, 2, 3, 4] and start == sos_at == 2
    m2 = micro_model(sos_first=True, continuous_positions=False)
    ids, pos, start, sos_at = st_prefix([4, 7], [8, 9], m2)
    assert ids == [m.tgt_vocab.sos, 4, 7, 8, 9] and pos == [0, 0, 1, 1, 2] and sos_at == 0 and start == 2


def test_make_batch_masks_context_and_sos():
    m = micro_model()
    b = micro_batch(m)
    # example 0: 5 context ids, sos, 2 targets -> labels valid from the sos position on
    assert b.st_mask[0].tolist() == [False] * 5 + [True] * 3
    assert b.st_out[0, 5:8].tolist() == [m.tgt_vocab.token_to_id["t1"], m.tgt_vocab.token_to_id["t3"],
                                         m.tgt_vocab.eos]
    assert b.ctc_tgt[0] == [m.tgt_vocab.token_to_id["t1"] + 1, m.tgt_vocab.token_to_id["t3"] + 1]


# ----------------------------------------------------------------- gradients

def _swap_param(model, name):
    def f(x):
        saved = model.params[name]
        model.params[name] = x
        try:
            return compute_loss(micro_batch(model), model).total
        finally:
            model.params[name] = saved
    return f


def test_gradient_check_one_encoder_block():
    m = micro_model(seed=5)
    x = np.random.default_rng(0).normal(size=(8, 3))

    def f(w):
        saved = m.params["enc_asr.0.self.q.w"]
        m.params["enc_asr.0.self.q.w"] = w
        try:
            return ad.sum(ad.tanh(encode_asr(x, m)))
        finally:
            m.params["enc_asr.0.self.q.w"] = saved

    assert gradient_check(f, m.params["enc_asr.0.self.q.w"]) < 1e-4


@pytest.mark.parametrize("name", ["frontend.w", "enc_asr.0.ff1.w", "enc_st.0.self.v.w", "dec_st.embed",
                                  "dec_st.0.cross.k.w", "dec_asr.out.w", "ctc_asr.w", "ctc_st.w"])
def test_end_to_end_gradient_check(name):
    m = micro_model(seed=1)
    assert gradient_check(_swap_param(m, name), m.params[name]) < 1e-3


# -------------------------------------------------------------- loss algebra

def test_context_label_perturbation_is_bit_identical():
    m = micro_model(seed=2)
    b = micro_batch(m)
    before = compute_loss(b, m).combined
    rng = np.random.default_rng(0)
    b.st_out[0, :5] = rng.integers(0, len(m.tgt_vocab), 5)
    b.st_out[1, :2] = rng.integers(0, len(m.tgt_vocab), 2)
    assert compute_loss(b, m).combined == before


def test_recombination_identity_bit_exact():
    m = micro_model(seed=4)
    for alphas in [(0.3, 0.3, 0.3), (0.1, 0.7, 0.5), (0.0, 1.0, 0.9)]:
        lb = compute_loss(micro_batch(m), m, alphas=alphas)
        assert combine_losses(lb.l_asr_att, lb.l_asr_ctc, lb.l_st_att, lb.l_st_ctc, *alphas) == lb.combined
        a1, a2, a3 = alphas
        ref = a3 * ((1 - a1) * lb.l_asr_att + a1 * lb.l_asr_ctc) + (1 - a3) * ((1 - a2) * lb.l_st_att + a2 * lb.l_st_ctc)
        assert abs(ref - lb.combined) < 1e-12


def test_alpha3_one_ignores_st_branch():
    m = micro_model(seed=6)
    b = micro_batch(m)
    before = compute_loss(b, m, alphas=(0.3, 0.3, 1.0)).combined
    for name, p in m.params.items():
        if name.startswith(("enc_st", "dec_st", "ctc_st")):
            p.data = p.data + 1.0
    assert compute_loss(b, m, alphas=(0.3, 0.3, 1.0)).combined == before


def test_zero_ctc_weights_give_zero_ctc_gradient():
    m = micro_model(seed=7)
    ad.zero_grads(m.parameters())
    ad.backward(compute_loss(micro_batch(m), m, alphas=(0.0, 0.0, 0.3)).total)
    for name in ("ctc_asr.w", "ctc_asr.b", "ctc_st.w", "ctc_st.b"):
        g = m.params[name].grad
        assert g is None or not g.any()


def test_asr_losses_isolated_from_st_encoder():
    m = micro_model(seed=8)
    b = micro_batch(m)
    before = compute_loss(b, m)
    for name, p in m.params.items():
        if name.startswith("enc_st"):
            p.data = np.zeros_like(p.data)
    after = compute_loss(b, m)
    assert (after.l_asr_att, after.l_asr_ctc) == (before.l_asr_att, before.l_asr_ctc)
    m = micro_model(seed=8)
    lb = compute_loss(b, m, alphas=(0.3, 0.3, 1.0))
    ad.zero_grads(m.parameters())
    ad.backward(lb.total)
    assert all(m.params[n].grad is None or not m.params[n].grad.any()
               for n in m.params if n.startswith(("enc_st", "dec_st", "ctc_st")))
    assert m.params["frontend.w"].grad is not None and m.params["frontend.w"].grad.any()


# ----------------------------------------------------------------- checkpoint

def test_checkpoint_round_trip(tmp_path):
    m = micro_model(seed=9)
    save_checkpoint(tmp_path / "m.ckpt", m, meta={"stage": "st"})
    m2, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert meta == {"stage": "st"}
    assert m2.cfg == m.cfg and m2.feature_dim == 3
    assert m2.src_vocab == m.src_vocab and m2.tgt_vocab == m.tgt_vocab
    assert list(m2.params) == list(m.params)
    assert all(m2.params[k].data.tobytes() == m.params[k].data.tobytes() for k in m.params)


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_config_validation():
    for bad in (dict(alpha1=1.5), dict(attention_dim=10, heads=3), dict(dropout_rate=1.0), dict(heads=0)):
        with pytest.raises(ValueError):
            ModelConfig(**bad).validate()


# ------------------------------------------------------------------- training

def test_noam_schedule():
    assert noam_lr(1, 1e-3, 100) == 1e-5
    assert noam_lr(100, 1e-3, 100) == 1e-3
    assert abs(noam_lr(400, 1e-3, 100) - 5e-4) < 1e-18
    assert max(noam_lr(s, 1e-3, 100) for s in range(1, 1000)) == 1e-3


def test_derive_seed_stable():
    assert derive_seed(0, "a") == derive_seed(0, "a")
    assert derive_seed(0, "a") != derive_seed(1, "a") != derive_seed(0, "b")


def test_adam_first_step():
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    p.grad = np.array([0.5, -4.0, 0.0])
    Adam([p]).step(0.1)
    expected = np.array([1.0, -2.0, 3.0]) - 0.1 * np.array([0.5, -4.0, 0.0]) / (np.abs([0.5, -4.0, 0.0]) + 1e-8)
    np.testing.assert_allclose(p.data, expected, rtol=0, atol=1e-15)


def test_adam_clipping_scales_gradient():
    p = Tensor(np.zeros(2), requires_grad=True)
    p.grad = np.array([3.0, 4.0])
    assert Adam([p]).step(0.1, clip=1.0) == 5.0


@pytest.fixture(scope="module")
def tiny_corpus():
    return generate_synthetic(GeneratorConfig(n_conversations=6, utterances_per_conversation=4, seed=2))


def _tiny_train(convs, **kw):
    cfg = ModelConfig(**{**MICRO, "dropout_rate": 0.1, "epochs": 3, "pretrain_epochs": 2, "batch_size": 8,
                         "warmup_steps": 5, "learning_rate": 3e-3, **kw})
    return train(convs, cfg, ContextConfig(k=2, dropout_p=0.2))


def test_training_is_deterministic_and_logs(tiny_corpus):
    m1, log1 = _tiny_train(tiny_corpus)
    m2, log2 = _tiny_train(tiny_corpus)
    assert all(m1.params[k].data.tobytes() == m2.params[k].data.tobytes() for k in m1.params)
    assert log1.lines() == log2.lines()
    assert log1.lines()[0] == "step,l_asr_att,l_asr_ctc,l_st_att,l_st_ctc,combined,lr,ctx_dropped_flag_rate"
    assert log1.recombination_ok
    assert log1.dropout_draws == 3 * 24
    m3, _ = _tiny_train(tiny_corpus, seed=1)
    assert any(m1.params[k].data.tobytes() != m3.params[k].data.tobytes() for k in m1.params)


def test_average_last_is_mean_of_final_epochs(tiny_corpus):
    snaps = []
    keep = lambda stage, ep, m: stage == "st" and snaps.append({k: p.data.copy() for k, p in m.params.items()})  # noqa: E731
    cfg = ModelConfig(**{**MICRO, "epochs": 4, "pretrain_epochs": 1, "batch_size": 8, "warmup_steps": 5,
                         "average_last": 3})
    m, _ = train(tiny_corpus, cfg, ContextConfig(k=2, dropout_p=0.2), on_epoch=keep)
    assert len(snaps) == 4
    for k, p in m.params.items():
        np.testing.assert_allclose(p.data, (snaps[1][k] + snaps[2][k] + snaps[3][k]) / 3, rtol=1e-12, atol=1e-15)
    plain, _ = train(tiny_corpus, replace(cfg, average_last=0), ContextConfig(k=2, dropout_p=0.2))
    assert all(np.array_equal(plain.params[k].data, snaps[3][k]) for k in snaps[3])


def test_training_loss_decreases(tiny_corpus):
    _, log = _tiny_train(tiny_corpus, epochs=8)
    st = [m for stage, _, m in log.epoch_means if stage == "st"]
    assert st[-1] < st[0]


@pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
def test_divergence_aborts_with_step(tiny_corpus):
    src, tgt = vocabs()
    cfg = ModelConfig(**{**MICRO, "epochs": 1, "pretrain_epochs": 1})
    from ctxst.train import build_vocabs
    bad = init_model(cfg, *build_vocabs(tiny_corpus), feature_dim=tiny_corpus[0][0].features.shape[1])
    bad.params["frontend.w"].data[0, 0] = math.inf
    with pytest.raises(TrainingDiverged) as exc:
        train(tiny_corpus, cfg, ContextConfig(k=0), init=bad)
    assert exc.value.step == 1 and "step 1" in str(exc.value)
