"""Corpus BLEU, paired bootstrap significance, and POS-tag F1 analysis."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

UNKNOWN_TAG = "X"


@dataclass
class TagScore:
    precision: float
    recall: float
    f1: float
    support: int
    matches: int = 0
    hyp_count: int = 0


@dataclass
class EvalReport:
    bleu: float
    ngram_precisions: List[float]
    brevity_penalty: float
    hyp_len: int = 0
    ref_len: int = 0
    per_tag_f1: Dict[str, TagScore] = field(default_factory=dict)


@dataclass
class SignificanceResult:
    p_value: float
    n_resamples: int
    delta_bleu: float


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _sentence_stats(hyp: Sequence[str], ref: Sequence[str]) -> np.ndarray:
    """[len(hyp), len(ref), match_1, total_1, ..., match_4, total_4]"""
    row = [len(hyp), len(ref)]
    for n in range(1, 5):
        h, r = _ngrams(hyp, n), _ngrams(ref, n)
        row.append(sum(min(c, r[g]) for g, c in h.items()))
        row.append(max(len(hyp) - n + 1, 0))
    return np.array(row, dtype=np.int64)


def _bleu_from_stats(stats: np.ndarray) -> Tuple[float, List[float], float]:
    c, r = int(stats[0]), int(stats[1])
    precisions = [stats[2 + 2 * i] / stats[3 + 2 * i] if stats[3 + 2 * i] else 0.0 for i in range(4)]
    if c == 0:
        bp = 0.0
    else:
        bp = 1.0 if c > r else math.exp(1.0 - r / c)
    if min(precisions) <= 0.0:
        return 0.0, precisions, bp
    return 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / 4.0), precisions, bp


def corpus_bleu(hyps: Sequence[Sequence[str]], refs: Sequence[Sequence[str]]) -> EvalReport:
    """Unsmoothed corpus BLEU-4 over whitespace tokens (case and punctuation kept)."""
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses for {len(refs)} references")
    if not hyps:
        raise ValueError("cannot score an empty corpus")
    stats = sum(_sentence_stats(h, r) for h, r in zip(hyps, refs))
    bleu, precisions, bp = _bleu_from_stats(stats)
    return EvalReport(bleu, precisions, bp, int(stats[0]), int(stats[1]))


def paired_bootstrap(hyps_a, hyps_b, refs, n_resamples: int = 1000, seed: int = 0) -> SignificanceResult:
    """One-sided test that system A beats system B; ties count against A."""
    if not (len(hyps_a) == len(hyps_b) == len(refs)):
        raise ValueError(f"length mismatch: {len(hyps_a)} / {len(hyps_b)} / {len(refs)}")
    if len(refs) < 2:
        raise ValueError("paired bootstrap needs at least 2 utterances")
    sa = np.stack([_sentence_stats(h, r) for h, r in zip(hyps_a, refs)])
    sb = np.stack([_sentence_stats(h, r) for h, r in zip(hyps_b, refs)])
    delta = _bleu_from_stats(sa.sum(0))[0] - _bleu_from_stats(sb.sum(0))[0]
    rng = np.random.default_rng(seed)
    n = len(refs)
    not_better = 0
    for _ in range(n_resamples):
        idx = rng.integers(0, n, n)
        if _bleu_from_stats(sa[idx].sum(0))[0] <= _bleu_from_stats(sb[idx].sum(0))[0]:
            not_better += 1
    return SignificanceResult((not_better + 1) / (n_resamples + 1), n_resamples, delta)


def pos_f1(hyps, refs, lexicon: Mapping[str, str]) -> Dict[str, TagScore]:
    """Per-tag clipped bag-of-token matching, aggregated over the corpus.

    Tags come from ``lexicon``; unknown tokens get tag "X". Tags with no
    reference tokens report support 0 and zero recall/F1.
    """
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses for {len(refs)} references")
    matches, hyp_count, ref_count = Counter(), Counter(), Counter()
    for h, r in zip(hyps, refs):
        hc, rc = Counter(h), Counter(r)
        for tok, c in hc.items():
            tag = lexicon.get(tok, UNKNOWN_TAG)
            hyp_count[tag] += c
            matches[tag] += min(c, rc.get(tok, 0))
        for tok, c in rc.items():
            ref_count[lexicon.get(tok, UNKNOWN_TAG)] += c
    out = {}
    for tag in sorted(set(hyp_count) | set(ref_count)):
        m, hn, rn = matches[tag], hyp_count[tag], ref_count[tag]
        p = m / hn if hn else 0.0
        r = m / rn if rn else 0.0
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        out[tag] = TagScore(p, r, f, rn, m, hn)
    return out


def relative_improvement(report_ctx: Mapping[str, TagScore], report_base: Mapping[str, TagScore],
                         top_n: int = 5, eps: float = 1e-6) -> List[Tuple[str, float]]:
    gains = []
    for tag, base in report_base.items():
        if base.support == 0 or tag not in report_ctx:
            continue
        gains.append((tag, (report_ctx[tag].f1 - base.f1) / max(base.f1, eps)))
    gains.sort(key=lambda x: (-x[1], x[0]))
    return gains[:top_n]


def token_accuracy(hyps, refs, groups: Sequence[Sequence[str]]) -> Optional[float]:
    """Clipped recall of the reference tokens that belong to ``groups``.

    Used for homophone senses and pronouns: each group lists interchangeable
    surface forms; a reference token counts as correct when the hypothesis
    contains it (clipped by count).
    """
    watched = {t for g in groups for t in g}
    hit = total = 0
    for h, r in zip(hyps, refs):
        hc = Counter(t for t in h if t in watched)
        for tok, c in Counter(t for t in r if t in watched).items():
            hit += min(c, hc.get(tok, 0))
            total += c
    return hit / total if total else None


# --------------------------------------------------------------- report files

def _fmt(x: float) -> str:
    return f"{x:.4f}"


def format_report(bleu: Optional[EvalReport] = None, significance: Optional[SignificanceResult] = None,
                  pos_tables: Optional[Dict[str, Dict[str, TagScore]]] = None,
                  improvements: Optional[List[Tuple[str, float]]] = None) -> str:
    lines: List[str] = []
    if bleu is not None:
        lines.append("[bleu]")
        lines.append(f"bleu={_fmt(bleu.bleu)}")
        for i, p in enumerate(bleu.ngram_precisions, 1):
            lines.append(f"precision_{i}={_fmt(p)}")
        lines.append(f"brevity_penalty={_fmt(bleu.brevity_penalty)}")
        lines.append(f"hyp_len={bleu.hyp_len}")
        lines.append(f"ref_len={bleu.ref_len}")
    if significance is not None:
        lines.append("[bootstrap]")
        lines.append(f"p_value={_fmt(significance.p_value)}")
        lines.append(f"n_resamples={significance.n_resamples}")
        lines.append(f"delta_bleu={_fmt(significance.delta_bleu)}")
    if pos_tables:
        lines.append("[pos_f1]")
        for system, table in pos_tables.items():
            for tag, s in table.items():
                lines.append(f"{system}.{tag}.precision={_fmt(s.precision)}")
                lines.append(f"{system}.{tag}.recall={_fmt(s.recall)}")
                lines.append(f"{system}.{tag}.f1={_fmt(s.f1)}")
                lines.append(f"{system}.{tag}.support={s.support}")
    if improvements is not None:
        lines.append("[relative_improvement]")
        for rank, (tag, gain) in enumerate(improvements, 1):
            lines.append(f"rank_{rank}={tag}")
            lines.append(f"gain_{rank}={_fmt(gain)}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> Dict[str, Dict[str, str]]:
    out: Dict[str, Dict[str, str]] = {}
    section = None
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1]
            out[section] = {}
        else:
            k, _, v = line.partition("=")
            out.setdefault(section or "", {})[k] = v
    return out
