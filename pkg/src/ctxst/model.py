"""Hierarchical CTC/attention encoder-decoder with a context-prefixed ST decoder.

ASR encoder -> {ASR CTC head, ASR decoder, ST encoder};
ST encoder -> {ST CTC head, ST decoder}. Encoders and decoders are pre-norm
transformer blocks; the ST decoder reads ``context ++ <sos> ++ target``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .tokenizer import Vocabulary

NEG = -1e9
CHECKPOINT_MAGIC = b"CTXSTCKP"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    asr_encoder_blocks: int = 2
    st_encoder_blocks: int = 1
    decoder_blocks: int = 2
    attention_dim: int = 64
    ff_dim: int = 128
    heads: int = 2
    alpha1: float = 0.3
    alpha2: float = 0.3
    alpha3: float = 0.3
    dropout_rate: float = 0.1
    learning_rate: float = 1e-3
    warmup_steps: int = 500
    epochs: int = 30
    pretrain_epochs: int = 10
    batch_size: int = 32
    grad_clip: float = 5.0
    average_last: int = 0  # ST stage: average parameters over the last N epochs (0/1: off)
    sos_first: bool = False
    continuous_positions: bool = True
    seed: int = 0

    def validate(self) -> None:
        for a in ("alpha1", "alpha2", "alpha3"):
            if not 0.0 <= getattr(self, a) <= 1.0:
                raise ValueError(f"ModelConfig.{a} must lie in [0, 1]")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        for name in ("asr_encoder_blocks", "attention_dim", "ff_dim", "heads", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be >= 1")
        if self.attention_dim % self.heads:
            raise ValueError("attention_dim must be divisible by heads")
        for name in ("st_encoder_blocks", "decoder_blocks", "epochs", "pretrain_epochs", "warmup_steps",
                     "average_last"):
            if getattr(self, name) < 0:
                raise ValueError(f"ModelConfig.{name} must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class Model:
    cfg: ModelConfig
    params: Dict[str, Tensor]
    src_vocab: Vocabulary
    tgt_vocab: Vocabulary
    feature_dim: int

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def copy(self) -> "Model":
        params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        return Model(self.cfg, params, self.src_vocab, self.tgt_vocab, self.feature_dim)


@dataclass
class LossBreakdown:
    l_asr_att: float
    l_asr_ctc: float
    l_st_att: float
    l_st_ctc: float
    combined: float
    total: Optional[Tensor] = field(default=None, repr=False)


def combine_losses(l_asr_att, l_asr_ctc, l_st_att, l_st_ctc, a1: float, a2: float, a3: float):
    """Multi-task interpolation; works on floats and Tensors with the same op order."""
    asr = l_asr_att * (1.0 - a1) + l_asr_ctc * a1
    st = l_st_att * (1.0 - a2) + l_st_ctc * a2
    return asr * a3 + st * (1.0 - a3)


# ------------------------------------------------------------------ parameters

def init_model(cfg: ModelConfig, src_vocab: Vocabulary, tgt_vocab: Vocabulary,
               feature_dim: int, seed: Optional[int] = None) -> Model:
    cfg.validate()
    rng = np.random.default_rng([cfg.seed if seed is None else seed, 0xA11CE])
    A, F = cfg.attention_dim, cfg.ff_dim
    p: Dict[str, np.ndarray] = {}

    def lin(name, n_in, n_out):
        lim = math.sqrt(6.0 / (n_in + n_out))
        p[name + ".w"] = rng.uniform(-lim, lim, (n_in, n_out))
        p[name + ".b"] = np.zeros(n_out)

    def norm(name):
        p[name + ".g"] = np.ones(A)
        p[name + ".b"] = np.zeros(A)

    def attn(name):
        for m in ("q", "k", "v", "o"):
            lin(f"{name}.{m}", A, A)

    def ff(name):
        lin(name + ".ff1", A, F)
        lin(name + ".ff2", F, A)

    lin("frontend", 2 * feature_dim, A)
    for enc, n in (("enc_asr", cfg.asr_encoder_blocks), ("enc_st", cfg.st_encoder_blocks)):
        for i in range(n):
            b = f"{enc}.{i}"
            norm(b + ".ln1"); attn(b + ".self"); norm(b + ".ln2"); ff(b)  # noqa: E702
        norm(enc + ".ln_out")
    for dec, vocab in (("dec_asr", src_vocab), ("dec_st", tgt_vocab)):
        p[dec + ".embed"] = rng.standard_normal((len(vocab), A))
        for i in range(cfg.decoder_blocks):
            b = f"{dec}.{i}"
            norm(b + ".ln1"); attn(b + ".self"); norm(b + ".ln2"); attn(b + ".cross")  # noqa: E702
            norm(b + ".ln3"); ff(b)  # noqa: E702
        norm(dec + ".ln_out")
        lin(dec + ".out", A, len(vocab))
    lin("ctc_asr", A, len(src_vocab) + 1)
    lin("ctc_st", A, len(tgt_vocab) + 1)
    params = {k: Tensor(v, requires_grad=True) for k, v in p.items()}
    return Model(cfg, params, src_vocab, tgt_vocab, feature_dim)


def sinusoid(positions: np.ndarray, dim: int) -> np.ndarray:
    pos = np.asarray(positions, dtype=np.float64)[..., None]
    i = np.arange(0, dim, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i / dim)
    out = np.zeros(pos.shape[:-1] + (dim,))
    out[..., 0::2] = np.sin(angle)
    out[..., 1::2] = np.cos(angle)
    return out


# ---------------------------------------------------------------------- layers

def _linear(x: Tensor, P, name: str) -> Tensor:
    return ad.add(ad.matmul(x, P[name + ".w"]), P[name + ".b"])


def _norm(x: Tensor, P, name: str) -> Tensor:
    return ad.layer_norm(x, P[name + ".g"], P[name + ".b"])


def _split_heads(x: Tensor, H: int) -> Tensor:
    B, L, A = x.shape
    return ad.transpose(ad.reshape(x, (B, L, H, A // H)), (0, 2, 1, 3))


def _attention(xq: Tensor, xkv: Tensor, mask: np.ndarray, P, name: str, H: int) -> Tensor:
    B, Lq, A = xq.shape
    q = _split_heads(_linear(xq, P, name + ".q"), H)
    k = _split_heads(_linear(xkv, P, name + ".k"), H)
    v = _split_heads(_linear(xkv, P, name + ".v"), H)
    scores = ad.add(ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(A // H)), mask)
    ctx = ad.matmul(ad.softmax(scores), v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (ctx.shape[0], Lq, A))
    return _linear(ctx, P, name + ".o")


def _ff(x: Tensor, P, name: str) -> Tensor:
    return _linear(ad.relu(_linear(x, P, name + ".ff1")), P, name + ".ff2")


def _encoder_stack(x: Tensor, mask: np.ndarray, model: Model, enc: str, n: int, rng) -> Tensor:
    P, cfg = model.params, model.cfg
    for i in range(n):
        b = f"{enc}.{i}"
        x = ad.add(x, ad.dropout(_attention(_norm(x, P, b + ".ln1"), _norm(x, P, b + ".ln1"), mask,
                                            P, b + ".self", cfg.heads), cfg.dropout_rate, rng))
        x = ad.add(x, ad.dropout(_ff(_norm(x, P, b + ".ln2"), P, b), cfg.dropout_rate, rng))
    return _norm(x, P, enc + ".ln_out")


def key_mask(lengths: Sequence[int], L: int) -> np.ndarray:
    """Additive [B, 1, 1, L] mask hiding padded keys."""
    valid = np.arange(L)[None, :] < np.asarray(lengths)[:, None]
    return np.where(valid, 0.0, NEG)[:, None, None, :]


def causal_mask(lengths: Sequence[int], L: int) -> np.ndarray:
    tri = np.tril(np.ones((L, L), dtype=bool))
    valid = np.arange(L)[None, :] < np.asarray(lengths)[:, None]
    ok = tri[None, :, :] & valid[:, None, :]
    return np.where(ok, 0.0, NEG)[:, None, :, :]


# -------------------------------------------------------------------- encoders

def encoder_lengths(frame_lengths: Sequence[int]) -> np.ndarray:
    return np.asarray(frame_lengths, dtype=np.int64) // 2


def encode_asr_batch(feats: np.ndarray, frame_lengths: Sequence[int], model: Model, rng=None) -> Tensor:
    """[B, T, D] padded features -> [B, T//2, A] ASR encoder states."""
    B, T, D = feats.shape
    if min(frame_lengths) < 4:
        raise ValueError(f"need at least 4 frames to downsample, got {min(frame_lengths)}")
    T2 = T // 2
    x = Tensor(feats[:, : 2 * T2].reshape(B, T2, 2 * D))
    x = ad.add(_linear(x, model.params, "frontend"), sinusoid(np.arange(T2), model.cfg.attention_dim))
    mask = key_mask(encoder_lengths(frame_lengths), T2)
    return _encoder_stack(x, mask, model, "enc_asr", model.cfg.asr_encoder_blocks, rng)


def encode_st_batch(h_asr: Tensor, enc_lengths: Sequence[int], model: Model, rng=None) -> Tensor:
    mask = key_mask(enc_lengths, h_asr.shape[1])
    return _encoder_stack(h_asr, mask, model, "enc_st", model.cfg.st_encoder_blocks, rng)


def encode_asr(features, model: Model) -> Tensor:
    """Single utterance [T, D] -> [T//2, A]."""
    f = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    h = encode_asr_batch(f[None], [f.shape[0]], model)
    return ad.reshape(h, h.shape[1:])


def encode_st(h_asr: Tensor, model: Model) -> Tensor:
    h = encode_st_batch(ad.reshape(h_asr, (1,) + h_asr.shape), [h_asr.shape[0]], model)
    return ad.reshape(h, h.shape[1:])


# -------------------------------------------------------------------- decoders

def decoder_batch(h: Tensor, enc_lengths: Sequence[int], prefix: np.ndarray, prefix_lengths: Sequence[int],
                  positions: np.ndarray, model: Model, which: str, rng=None) -> Tensor:
    """Teacher-forced decoder over padded ``prefix`` [B, L]; returns logits [B, L, V]."""
    P, cfg = model.params, model.cfg
    dec = "dec_" + which
    vocab = model.src_vocab if which == "asr" else model.tgt_vocab
    prefix = np.asarray(prefix, dtype=np.int64)
    if prefix.size and (prefix.min() < 0 or prefix.max() >= len(vocab)):
        raise IndexError(f"prefix id outside the {which} vocabulary of size {len(vocab)}")
    B, L = prefix.shape
    x = ad.add(ad.embedding(P[dec + ".embed"], prefix), sinusoid(positions, cfg.attention_dim))
    self_mask = causal_mask(prefix_lengths, L)
    cross_mask = key_mask(enc_lengths, h.shape[1])
    for i in range(cfg.decoder_blocks):
        b = f"{dec}.{i}"
        y = _norm(x, P, b + ".ln1")
        x = ad.add(x, ad.dropout(_attention(y, y, self_mask, P, b + ".self", cfg.heads), cfg.dropout_rate, rng))
        y = _norm(x, P, b + ".ln2")
        x = ad.add(x, ad.dropout(_attention(y, h, cross_mask, P, b + ".cross", cfg.heads), cfg.dropout_rate, rng))
        x = ad.add(x, ad.dropout(_ff(_norm(x, P, b + ".ln3"), P, b), cfg.dropout_rate, rng))
    return _linear(_norm(x, P, dec + ".ln_out"), P, dec + ".out")


def st_prefix(context_ids: Sequence[int], target_ids: Sequence[int], model: Model):
    """Decoder input ids, positions and index of <sos> for one ST example."""
    sos = model.tgt_vocab.sos
    ctx = list(context_ids)
    if model.cfg.sos_first:
        ids = [sos] + ctx + list(target_ids)
        start = len(ctx)  # last context token (or sos) predicts the first target token
        sos_at = 0
    else:
        ids = ctx + [sos] + list(target_ids)
        start = len(ctx)
        sos_at = len(ctx)
    if model.cfg.continuous_positions:
        pos = list(range(len(ids)))
    elif model.cfg.sos_first:
        pos = [0] + list(range(len(ctx))) + list(range(1, len(target_ids) + 1))
    else:
        pos = list(range(len(ctx))) + list(range(len(target_ids) + 1))
    return ids, pos, start, sos_at


def decoder_forward(h: Tensor, prefix_ids: Sequence[int], model: Model, which: str,
                    positions: Optional[Sequence[int]] = None) -> Tensor:
    """Logits [L, V] for one prefix over encoder states ``h`` [T', A]."""
    if len(prefix_ids) == 0:
        raise ValueError("decoder prefix must contain at least <sos>")
    ids = np.asarray(prefix_ids, dtype=np.int64)[None]
    pos = np.arange(ids.shape[1]) if positions is None else np.asarray(positions)
    logits = decoder_batch(ad.reshape(h, (1,) + h.shape), [h.shape[0]], ids, [ids.shape[1]],
                           pos[None], model, which)
    return ad.reshape(logits, logits.shape[1:])


# ----------------------------------------------------------------------- batch

@dataclass
class Example:
    """One training utterance with its rendered context."""

    features: np.ndarray
    src_ids: List[int]
    tgt_ids: List[int]
    ctx_ids: List[int] = field(default_factory=list)


@dataclass
class Batch:
    feats: np.ndarray
    frame_lengths: np.ndarray
    enc_lengths: np.ndarray
    asr_in: np.ndarray
    asr_out: np.ndarray
    asr_mask: np.ndarray
    asr_pos: np.ndarray
    asr_lengths: np.ndarray
    st_in: np.ndarray
    st_out: np.ndarray
    st_mask: np.ndarray
    st_pos: np.ndarray
    st_lengths: np.ndarray
    ctc_src: List[List[int]]
    ctc_tgt: List[List[int]]


def make_batch(examples: Sequence[Example], model: Model) -> Batch:
    sv, tv = model.src_vocab, model.tgt_vocab
    B = len(examples)
    T = max(e.features.shape[0] for e in examples)
    D = examples[0].features.shape[1]
    feats = np.zeros((B, T, D))
    flen = np.array([e.features.shape[0] for e in examples])
    for b, e in enumerate(examples):
        feats[b, : flen[b]] = e.features

    La = max(len(e.src_ids) for e in examples) + 1
    asr_in = np.full((B, La), sv.pad, dtype=np.int64)
    asr_out = np.full((B, La), sv.pad, dtype=np.int64)
    asr_mask = np.zeros((B, La), dtype=bool)
    asr_len = np.zeros(B, dtype=np.int64)
    for b, e in enumerate(examples):
        n = len(e.src_ids) + 1
        asr_in[b, :n] = [sv.sos] + e.src_ids
        asr_out[b, :n] = e.src_ids + [sv.eos]
        asr_mask[b, :n] = True
        asr_len[b] = n

    rows = [st_prefix(e.ctx_ids, e.tgt_ids, model) for e in examples]
    Ls = max(len(r[0]) for r in rows)
    st_in = np.full((B, Ls), tv.pad, dtype=np.int64)
    st_out = np.full((B, Ls), tv.pad, dtype=np.int64)
    st_mask = np.zeros((B, Ls), dtype=bool)
    st_pos = np.zeros((B, Ls), dtype=np.int64)
    st_len = np.zeros(B, dtype=np.int64)
    for b, (ids, pos, start, _) in enumerate(rows):
        n = len(ids)
        st_in[b, :n] = ids
        st_out[b, : n - 1] = ids[1:]
        st_out[b, n - 1] = tv.eos
        st_mask[b, start:n] = True
        st_pos[b, :n] = pos
        st_len[b] = n
    return Batch(feats, flen, encoder_lengths(flen), asr_in, asr_out, asr_mask,
                 np.tile(np.arange(La), (B, 1)), asr_len, st_in, st_out, st_mask, st_pos, st_len,
                 [[i + 1 for i in e.src_ids] for e in examples],
                 [[i + 1 for i in e.tgt_ids] for e in examples])


def compute_loss(batch: Batch, model: Model, rng=None, alphas=None) -> LossBreakdown:
    """Four task losses and their interpolation; ``total`` is the differentiable combined loss."""
    cfg = model.cfg
    a1, a2, a3 = alphas if alphas is not None else (cfg.alpha1, cfg.alpha2, cfg.alpha3)
    P = model.params
    h_asr = encode_asr_batch(batch.feats, batch.frame_lengths, model, rng)
    lp = ad.log_softmax(_linear(h_asr, P, "ctc_asr"))
    l_asr_ctc = ad.mean(ad.ctc_loss_batch(lp, batch.enc_lengths, batch.ctc_src))
    logits = decoder_batch(h_asr, batch.enc_lengths, batch.asr_in, batch.asr_lengths, batch.asr_pos,
                           model, "asr", rng)
    l_asr_att = ad.masked_cross_entropy(logits, batch.asr_out, batch.asr_mask)
    if a3 < 1.0:
        h_st = encode_st_batch(h_asr, batch.enc_lengths, model, rng)
        lp = ad.log_softmax(_linear(h_st, P, "ctc_st"))
        l_st_ctc = ad.mean(ad.ctc_loss_batch(lp, batch.enc_lengths, batch.ctc_tgt))
        logits = decoder_batch(h_st, batch.enc_lengths, batch.st_in, batch.st_lengths, batch.st_pos,
                               model, "st", rng)
        l_st_att = ad.masked_cross_entropy(logits, batch.st_out, batch.st_mask)
    else:
        l_st_ctc = l_st_att = Tensor(0.0)
    total = combine_losses(l_asr_att, l_asr_ctc, l_st_att, l_st_ctc, a1, a2, a3)
    return LossBreakdown(l_asr_att.item(), l_asr_ctc.item(), l_st_att.item(), l_st_ctc.item(),
                         total.item(), total)


# ------------------------------------------------------------------ checkpoint

def save_checkpoint(path, model: Model, meta: Optional[dict] = None) -> None:
    header = {"model": asdict(model.cfg), "feature_dim": model.feature_dim,
              "src_vocab": model.src_vocab.id_to_token, "tgt_vocab": model.tgt_vocab.id_to_token,
              "meta": meta or {}}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(model.params)))
        for name, t in model.params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", t.data.ndim))
            fh.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Return (model, meta)."""
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, n = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    header = json.loads(data[off:off + n].decode("utf-8"))
    off += n
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    params = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + ln].decode("utf-8")
        off += ln
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=off).astype(np.float64).reshape(dims)
        off += 8 * size
        params[name] = Tensor(arr, requires_grad=True)
    model = Model(ModelConfig.from_dict(header["model"]), params, Vocabulary(header["src_vocab"]),
                  Vocabulary(header["tgt_vocab"]), header["feature_dim"])
    return model, header["meta"]
