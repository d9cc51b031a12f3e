"""ASR pretraining followed by joint ST fine-tuning."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .context import ContextConfig, ContextWindow, apply_context_dropout, assemble_context
from .corpus import Conversation
from .model import (Example, LossBreakdown, Model, ModelConfig, combine_losses, compute_loss,
                    init_model, make_batch)
from .tokenizer import Vocabulary, build_vocab, encode

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "l_asr_att", "l_asr_ctc", "l_st_att", "l_st_ctc", "combined", "lr",
              "ctx_dropped_flag_rate")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, detail: str = ""):
        super().__init__(f"non-finite loss at step {step}" + (f": {detail}" if detail else ""))
        self.step = step


def derive_seed(seed: int, name: str) -> int:
    """Stable per-component seed: sha256 of "<seed>:<name>"."""
    return int.from_bytes(hashlib.sha256(f"{seed}:{name}".encode()).digest()[:8], "little")


def noam_lr(step: int, base_lr: float, warmup: int) -> float:
    """Inverse-sqrt schedule peaking at ``base_lr`` after ``warmup`` steps."""
    step = max(step, 1)
    if warmup <= 0:
        return base_lr / math.sqrt(step)
    return base_lr * min(step / warmup, math.sqrt(warmup / step))


class Adam:
    def __init__(self, params: Sequence[ad.Tensor], betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float, clip: float = 0.0) -> float:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
        scale = clip / norm if clip > 0 and norm > clip else 1.0
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if scale != 1.0:
                g = g * scale
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm


@dataclass
class TrainLog:
    records: List[Dict[str, float]] = field(default_factory=list)
    epoch_means: List[Tuple[str, int, float]] = field(default_factory=list)
    dropout_draws: int = 0
    dropout_fired: int = 0
    recombination_ok: bool = True

    @property
    def dropped_rate(self) -> float:
        return self.dropout_fired / self.dropout_draws if self.dropout_draws else 0.0

    def lines(self) -> List[str]:
        out = [",".join(LOG_FIELDS)]
        for r in self.records:
            out.append(",".join([str(int(r["step"]))] + [repr(float(r[k])) for k in LOG_FIELDS[1:]]))
        return out

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.lines()) + "\n")


def build_vocabs(convs: Sequence[Conversation]) -> Tuple[Vocabulary, Vocabulary]:
    utts = [u for c in convs for u in c.utterances]
    src = build_vocab([u.source_tokens for u in utts], max_size=10**6)
    tgt = build_vocab([u.target_tokens for u in utts], max_size=10**6)
    return src, tgt


def gold_windows(convs: Sequence[Conversation], ctx: ContextConfig, tgt_vocab: Vocabulary):
    gold = ContextConfig(k=ctx.k, speaker_mode=ctx.speaker_mode, truncation_limit=ctx.truncation_limit,
                         dropout_p=ctx.dropout_p, source_mode="gold")
    return [assemble_context(c, u.index, gold, vocab=tgt_vocab) for c in convs for u in c.utterances]


def train(train_convs: Sequence[Conversation], model_cfg: ModelConfig, ctx_cfg: ContextConfig, *,
          vocabs: Optional[Tuple[Vocabulary, Vocabulary]] = None, init: Optional[Model] = None,
          stages: Tuple[str, ...] = ("asr", "st"), on_epoch=None) -> Tuple[Model, TrainLog]:
    """Train from scratch (or from ``init``) through the requested stages.

    Stage "asr" optimizes the ASR losses only; stage "st" optimizes the full
    interpolated objective with gold context and context dropout.
    ``on_epoch(stage, epoch, model)`` is called after every epoch. With
    ``model_cfg.average_last = N`` the ST stage ends by replacing the
    parameters with their mean over the last N epoch snapshots.
    """
    model_cfg.validate()
    ctx_cfg.validate()
    utts = [u for c in train_convs for u in c.utterances]
    if not utts:
        raise ValueError("empty training set")
    if init is not None:
        model = init.copy()
        model.cfg = model_cfg
        src_vocab, tgt_vocab = model.src_vocab, model.tgt_vocab
    else:
        src_vocab, tgt_vocab = vocabs if vocabs is not None else build_vocabs(train_convs)
        model = init_model(model_cfg, src_vocab, tgt_vocab, utts[0].features.shape[1])
    windows = gold_windows(train_convs, ctx_cfg, tgt_vocab)
    base = [Example(u.features, encode(u.source_tokens, src_vocab), encode(u.target_tokens, tgt_vocab))
            for u in utts]
    seed = model_cfg.seed
    tlog = TrainLog()
    for stage in stages:
        if stage == "asr":
            epochs, alphas = model_cfg.pretrain_epochs, (model_cfg.alpha1, model_cfg.alpha2, 1.0)
        elif stage == "st":
            epochs, alphas = model_cfg.epochs, (model_cfg.alpha1, model_cfg.alpha2, model_cfg.alpha3)
        else:
            raise ValueError(f"unknown training stage {stage!r}")
        _run_stage(model, base, windows, ctx_cfg, epochs, alphas, seed, stage, tlog, on_epoch)
    return model, tlog


def _run_stage(model: Model, base: List[Example], windows: List[ContextWindow], ctx_cfg: ContextConfig,
               epochs: int, alphas, seed: int, stage: str, tlog: TrainLog, on_epoch=None) -> None:
    cfg = model.cfg
    params = model.parameters()
    opt = Adam(params)
    order_rng = np.random.default_rng(derive_seed(seed, f"{stage}/order"))
    drop_rng = np.random.default_rng(derive_seed(seed, f"{stage}/dropout"))
    ctx_rng = np.random.default_rng(derive_seed(seed, f"{stage}/context-dropout"))
    use_ctx = stage == "st" and ctx_cfg.k > 0
    n_avg = cfg.average_last if stage == "st" else 0
    snapshots: List[Dict[str, np.ndarray]] = []
    step = 0
    for epoch in range(epochs):
        order = order_rng.permutation(len(base))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            exs, fired = [], 0
            for i in idx:
                e = base[i]
                ctx_ids: List[int] = []
                if use_ctx:
                    w = windows[i]
                    if ctx_cfg.dropout_p > 0:
                        dropped = apply_context_dropout(w, ctx_cfg.dropout_p, ctx_rng)
                        tlog.dropout_draws += 1
                        if dropped is not w:
                            fired += 1
                            tlog.dropout_fired += 1
                        w = dropped
                    ctx_ids = w.rendered if not w.empty else []
                exs.append(Example(e.features, e.src_ids, e.tgt_ids, ctx_ids))
            step += 1
            lr = noam_lr(step, cfg.learning_rate, cfg.warmup_steps)
            try:
                loss = compute_loss(make_batch(exs, model), model, rng=drop_rng, alphas=alphas)
            except FloatingPointError as exc:
                raise TrainingDiverged(step, str(exc)) from exc
            if not math.isfinite(loss.combined):
                raise TrainingDiverged(step)
            again = combine_losses(loss.l_asr_att, loss.l_asr_ctc, loss.l_st_att, loss.l_st_ctc, *alphas)
            if again != loss.combined:
                tlog.recombination_ok = False
            ad.zero_grads(params)
            ad.backward(loss.total)
            opt.step(lr, cfg.grad_clip)
            tlog.records.append({"step": step, "l_asr_att": loss.l_asr_att, "l_asr_ctc": loss.l_asr_ctc,
                                 "l_st_att": loss.l_st_att, "l_st_ctc": loss.l_st_ctc,
                                 "combined": loss.combined, "lr": lr,
                                 "ctx_dropped_flag_rate": fired / len(idx)})
            total += loss.combined * len(idx)
            count += len(idx)
        mean = total / max(count, 1)
        tlog.epoch_means.append((stage, epoch, mean))
        log.info("%s epoch %d: mean combined loss %.4f", stage, epoch, mean)
        if on_epoch is not None:
            on_epoch(stage, epoch, model)
        if n_avg > 1:
            snapshots.append({k: p.data.copy() for k, p in model.params.items()})
            del snapshots[:-n_avg]
    if n_avg > 1 and snapshots:
        for k, p in model.params.items():
            p.data[...] = np.mean([snap[k] for snap in snapshots], axis=0)
