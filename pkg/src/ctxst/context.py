"""Decoder-prefix context built from previous utterances of the same conversation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .corpus import Conversation
from .tokenizer import Vocabulary, encode

SPEAKER_MODES = ("cross", "same")
SOURCE_MODES = ("gold", "hyp")


@dataclass
class ContextConfig:
    k: int = 2
    speaker_mode: str = "cross"
    truncation_limit: int = 50
    dropout_p: float = 0.2
    source_mode: str = "gold"

    def validate(self) -> None:
        if self.k < 0:
            raise ValueError("ContextConfig.k must be >= 0")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("ContextConfig.dropout_p must lie in [0, 1)")
        if self.truncation_limit < 1:
            raise ValueError("ContextConfig.truncation_limit must be >= 1")
        if self.speaker_mode not in SPEAKER_MODES:
            raise ValueError(f"speaker_mode must be one of {SPEAKER_MODES}")
        if self.source_mode not in SOURCE_MODES:
            raise ValueError(f"source_mode must be one of {SOURCE_MODES}")


@dataclass
class ContextWindow:
    """Previous sentences, oldest first, as (speaker role, target tokens)."""

    entries: List[Tuple[str, List[str]]] = field(default_factory=list)
    rendered: List[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def empty(self) -> bool:
        return not self.entries


def assemble_context(conv: Conversation, index: int, cfg: ContextConfig,
                     hyp_store: Optional[Mapping[Tuple[str, int], Sequence[str]]] = None,
                     vocab: Optional[Vocabulary] = None) -> ContextWindow:
    """Pick up to ``cfg.k`` prior utterances of ``conv`` and return them oldest first.

    In hyp mode the tokens come from ``hyp_store`` keyed by (conversation id,
    index); utterances without a stored hypothesis are skipped. When ``vocab``
    is given the window is also rendered.
    """
    if not 0 <= index < len(conv):
        raise IndexError(f"utterance index {index} out of range for {conv.id} ({len(conv)} utterances)")
    if (cfg.source_mode == "hyp") != (hyp_store is not None):
        raise ValueError("hyp_store must be given exactly when source_mode is 'hyp'")
    speaker = conv[index].speaker
    picked: List[Tuple[str, List[str]]] = []
    j = index - 1
    while j >= 0 and len(picked) < cfg.k:
        utt = conv[j]
        j -= 1
        if cfg.speaker_mode == "same" and utt.speaker != speaker:
            continue
        if hyp_store is None:
            tokens = list(utt.target_tokens)
        else:
            if (conv.id, utt.index) not in hyp_store:
                continue
            tokens = list(hyp_store[(conv.id, utt.index)])
        picked.append((utt.speaker, tokens))
    window = ContextWindow(entries=picked[::-1])
    if vocab is not None:
        window.rendered = render(window, vocab, cfg.truncation_limit)
    return window


def render(window: ContextWindow, v: Vocabulary, limit: int) -> List[int]:
    """Speaker tag + sentence per entry, joined by [SEP]; keep the last ``limit`` ids."""
    ids: List[int] = []
    for n, (role, tokens) in enumerate(window.entries):
        if n:
            ids.append(v.sep)
        ids.append(v.speaker_id(role))
        ids.extend(encode(tokens, v))
    return ids[-limit:] if len(ids) > limit else ids


def apply_context_dropout(window: ContextWindow, p: float, rng: np.random.Generator) -> ContextWindow:
    """Return an empty window with probability ``p``, else ``window`` unchanged."""
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must lie in [0, 1)")
    if p > 0.0 and rng.random() < p:
        return ContextWindow()
    return window


def random_context(convs: Sequence[Conversation], conv_pos: int, index: int, cfg: ContextConfig,
                   rng: np.random.Generator, vocab: Optional[Vocabulary] = None) -> ContextWindow:
    """Gold window of the same shape taken from a different, randomly chosen conversation."""
    if index == 0 or len(convs) < 2:
        return ContextWindow()
    other = int(rng.integers(len(convs) - 1))
    other += other >= conv_pos
    donor = convs[other]
    gold = ContextConfig(k=cfg.k, speaker_mode=cfg.speaker_mode,
                         truncation_limit=cfg.truncation_limit, dropout_p=0.0)
    return assemble_context(donor, min(index, len(donor) - 1), gold, vocab=vocab)
