"""Beam search over the ST decoder and corpus-level decoding strategies.

Strategies differ only in where each utterance's context window comes from:

* isolated: always empty;
* exact: the model's own top hypotheses for earlier utterances, produced in
  order within a conversation;
* multistage: stage 0 is isolated; stage s uses stage s-1's outputs.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .context import ContextConfig, ContextWindow, assemble_context, random_context
from .corpus import Conversation, Utterance
from .model import Model, decoder_batch, encode_asr_batch, encode_st_batch, st_prefix
from .tokenizer import decode as ids_to_tokens

Key = Tuple[str, int]


@dataclass
class DecodeConfig:
    beam_size: int = 10
    length_penalty: float = 0.3
    max_len: Optional[int] = None  # None: 2 * source length + 8
    stages: int = 1

    def validate(self) -> None:
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.max_len is not None and self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.stages < 1:
            raise ValueError("stages must be >= 1")

    def limit_for(self, n_source_tokens: int) -> int:
        return self.max_len if self.max_len is not None else 2 * n_source_tokens + 8


@dataclass
class Hypothesis:
    ids: List[int]
    log_prob: float
    normalized_score: float
    tokens: List[str] = field(default_factory=list)


def encode_features(model: Model, features: np.ndarray) -> ad.Tensor:
    with ad.no_grad():
        f = np.asarray(features, dtype=np.float64)[None]
        h = encode_asr_batch(f, [f.shape[1]], model)
        return encode_st_batch(h, [h.shape[1]], model)


def next_log_probs(model: Model, h: ad.Tensor, ctx: Sequence[int], beams: Sequence[Sequence[int]]) -> np.ndarray:
    """Next-token log-probabilities [len(beams), V] for equal-length target prefixes."""
    rows = [st_prefix(ctx, b, model) for b in beams]
    ids = np.array([r[0] for r in rows], dtype=np.int64)
    pos = np.array([r[1] for r in rows], dtype=np.int64)
    with ad.no_grad():
        logits = decoder_batch(h, [h.shape[1]], ids, [ids.shape[1]] * len(beams), pos, model, "st")
    last = logits.data[:, -1, :]
    shifted = last - last.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def output_ids(model: Model) -> np.ndarray:
    """Token ids a hypothesis may emit: every non-special token plus eos."""
    v = model.tgt_vocab
    return np.array(sorted([i for i in range(len(v)) if not v.is_special(i)] + [v.eos]))


def beam_search(model: Model, features: np.ndarray, context_ids: Sequence[int], cfg: DecodeConfig,
                max_len: Optional[int] = None, h: Optional[ad.Tensor] = None) -> List[Hypothesis]:
    """Ranked hypotheses for one utterance with ``context_ids`` as decoder initial condition.

    Candidates are ranked by log_prob + length_penalty * len(ids); ties go to
    the lower token id, then to the earlier parent beam. Hypotheses end on eos
    or when they reach ``max_len`` tokens.
    """
    vocab = model.tgt_vocab
    if max_len is None:
        max_len = cfg.max_len if cfg.max_len is not None else np.asarray(features).shape[0] // 2 + 8
    if h is None:
        h = encode_features(model, features)
    beta = cfg.length_penalty
    eos = vocab.eos
    allowed = output_ids(model)
    live: List[Tuple[List[int], float]] = [([], 0.0)]
    finished: List[Hypothesis] = []
    for step in range(max_len + 1):
        if not live:
            break
        if step == max_len:
            finished.extend(Hypothesis(ids, lp, lp + beta * len(ids)) for ids, lp in live)
            break
        logp = next_log_probs(model, h, context_ids, [ids for ids, _ in live])
        cands = []
        for b, (ids, lp) in enumerate(live):
            for tok in allowed:
                new_lp = lp + float(logp[b, tok])
                n = len(ids) + (tok != eos)
                cands.append((-(new_lp + beta * n), int(tok), b, new_lp))
        cands.sort()
        survivors = []
        for neg_score, tok, b, new_lp in cands[: cfg.beam_size]:
            ids = live[b][0]
            if tok == eos:
                finished.append(Hypothesis(list(ids), new_lp, -neg_score))
            else:
                survivors.append((ids + [tok], new_lp))
        live = survivors
    order = sorted(range(len(finished)), key=lambda i: (-finished[i].normalized_score, i))
    ranked = [finished[i] for i in order]
    for hyp in ranked:
        hyp.tokens = ids_to_tokens(hyp.ids, vocab)
    return ranked


def greedy_search(model: Model, features: np.ndarray, context_ids: Sequence[int], max_len: int) -> List[int]:
    h = encode_features(model, features)
    allowed = output_ids(model)
    ids: List[int] = []
    while len(ids) < max_len:
        logp = next_log_probs(model, h, context_ids, [ids])[0]
        tok = int(allowed[np.argmax(logp[allowed])])
        if tok == model.tgt_vocab.eos:
            break
        ids.append(tok)
    return ids


# ------------------------------------------------------------------ strategies

WindowFn = Callable[[Conversation, int], ContextWindow]


def _map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def decode_utterance(model: Model, utt: Utterance, window: ContextWindow, cfg: DecodeConfig) -> Hypothesis:
    ctx = window.rendered if not window.empty else []
    hyps = beam_search(model, utt.features, ctx, cfg, max_len=cfg.limit_for(len(utt.source_tokens)))
    return hyps[0]


def decode_with_windows(model: Model, convs: Sequence[Conversation], window_fn: WindowFn,
                        cfg: DecodeConfig, jobs: int = 1) -> Dict[Key, Hypothesis]:
    """Decode every utterance independently with the window ``window_fn`` supplies."""
    cfg.validate()
    items = [(c, u) for c in convs for u in c.utterances]

    def run(item):
        conv, utt = item
        return decode_utterance(model, utt, window_fn(conv, utt.index), cfg)

    return {u.key: hyp for (c, u), hyp in zip(items, _map(run, items, jobs))}


def decode_isolated(model: Model, convs: Sequence[Conversation], cfg: DecodeConfig,
                    jobs: int = 1) -> Dict[Key, Hypothesis]:
    return decode_with_windows(model, convs, lambda c, i: ContextWindow(), cfg, jobs)


def decode_gold(model: Model, convs: Sequence[Conversation], ctx_cfg: ContextConfig, cfg: DecodeConfig,
                jobs: int = 1) -> Dict[Key, Hypothesis]:
    gold = ContextConfig(k=ctx_cfg.k, speaker_mode=ctx_cfg.speaker_mode,
                         truncation_limit=ctx_cfg.truncation_limit, dropout_p=0.0, source_mode="gold")
    return decode_with_windows(
        model, convs, lambda c, i: assemble_context(c, i, gold, vocab=model.tgt_vocab), cfg, jobs)


def decode_random(model: Model, convs: Sequence[Conversation], ctx_cfg: ContextConfig, cfg: DecodeConfig,
                  seed: int, jobs: int = 1) -> Dict[Key, Hypothesis]:
    """Context windows taken from a different conversation, chosen per utterance from ``seed``."""
    pos = {c.id: n for n, c in enumerate(convs)}

    def window(conv, i):
        rng = np.random.default_rng([seed, pos[conv.id], i])
        return random_context(convs, pos[conv.id], i, ctx_cfg, rng, vocab=model.tgt_vocab)

    return decode_with_windows(model, convs, window, cfg, jobs)


def _hyp_cfg(ctx_cfg: ContextConfig) -> ContextConfig:
    return ContextConfig(k=ctx_cfg.k, speaker_mode=ctx_cfg.speaker_mode,
                         truncation_limit=ctx_cfg.truncation_limit, dropout_p=0.0, source_mode="hyp")


def decode_exact(model: Model, conv: Conversation, ctx_cfg: ContextConfig, cfg: DecodeConfig,
                 forced: Optional[Dict[Key, List[str]]] = None,
                 windows: Optional[Dict[Key, ContextWindow]] = None) -> Dict[Key, Hypothesis]:
    """Decode ``conv`` in order, feeding each top hypothesis into later contexts.

    ``forced`` replaces the stored hypothesis for selected utterances;
    ``windows`` (if given) receives the window used for every utterance.
    """
    if ctx_cfg.source_mode != "hyp":
        raise ValueError("exact decoding uses hypothesis context (source_mode='hyp')")
    cfg.validate()
    hcfg = _hyp_cfg(ctx_cfg)
    store: Dict[Key, List[str]] = {}
    out: Dict[Key, Hypothesis] = {}
    for utt in conv.utterances:
        w = assemble_context(conv, utt.index, hcfg, hyp_store=store, vocab=model.tgt_vocab)
        if windows is not None:
            windows[utt.key] = w
        hyp = decode_utterance(model, utt, w, cfg)
        out[utt.key] = hyp
        store[utt.key] = list(forced[utt.key]) if forced and utt.key in forced else hyp.tokens
    return out


def decode_exact_corpus(model: Model, convs: Sequence[Conversation], ctx_cfg: ContextConfig,
                        cfg: DecodeConfig, jobs: int = 1) -> Dict[Key, Hypothesis]:
    out: Dict[Key, Hypothesis] = {}
    for part in _map(lambda c: decode_exact(model, c, ctx_cfg, cfg), list(convs), jobs):
        out.update(part)
    return out


@dataclass
class MultistageResult:
    final: Dict[Key, Hypothesis]
    stages: List[Dict[Key, Hypothesis]]
    windows: List[Dict[Key, ContextWindow]]


def decode_multistage(model: Model, convs: Sequence[Conversation], ctx_cfg: ContextConfig,
                      cfg: DecodeConfig, jobs: int = 1) -> MultistageResult:
    """Stage 0 is isolated; each later stage conditions on the previous stage's outputs only."""
    cfg.validate()
    hcfg = _hyp_cfg(ctx_cfg)
    stage0 = decode_isolated(model, convs, cfg, jobs)
    stages = [stage0]
    windows: List[Dict[Key, ContextWindow]] = [{}]
    for _ in range(cfg.stages):
        frozen = {k: list(h.tokens) for k, h in stages[-1].items()}
        used: Dict[Key, ContextWindow] = {}

        def window(conv, i, frozen=frozen, used=used):
            w = assemble_context(conv, i, hcfg, hyp_store=frozen, vocab=model.tgt_vocab)
            used[(conv.id, i)] = w
            return w

        stages.append(decode_with_windows(model, convs, window, cfg, jobs))
        windows.append(used)
    return MultistageResult(stages[-1], stages, windows)


# ------------------------------------------------------------------------- I/O

def write_decode_output(path, results: Dict[Key, Hypothesis]) -> None:
    lines = [f"{cid}\t{idx}\t{h.normalized_score:.6f}\t{' '.join(h.tokens)}\n"
             for (cid, idx), h in sorted(results.items())]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_decode_output(path) -> Dict[Key, Tuple[float, List[str]]]:
    out: Dict[Key, Tuple[float, List[str]]] = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"{path}:{n}: expected 4 tab-separated fields")
        cid, idx, score, toks = parts
        out[(cid, int(idx))] = (float(score), toks.split())
    return out
