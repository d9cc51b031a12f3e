"""Word-level vocabularies with the special tokens the context prefix needs."""

from __future__ import annotations

from collections import Counter
from pathlib import Path
from typing import Dict, Iterable, List, Sequence

PAD, SOS, EOS, UNK = "<pad>", "<sos>", "<eos>", "<unk>"
SPK_A, SPK_B, SEP = "[SpkA]", "[SpkB]", "[SEP]"
SPECIALS = (PAD, SOS, EOS, UNK, SPK_A, SPK_B, SEP)
SPEAKER_TAGS = {"A": SPK_A, "B": SPK_B}


class Vocabulary:
    """Bijective token <-> id map; specials occupy ids 0..6."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens in canonical order")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.id_to_token: List[str] = list(tokens)
        self.token_to_id: Dict[str, int] = {t: i for i, t in enumerate(tokens)}

    pad = property(lambda self: 0)
    sos = property(lambda self: 1)
    eos = property(lambda self: 2)
    unk = property(lambda self: 3)
    spk_a = property(lambda self: 4)
    spk_b = property(lambda self: 5)
    sep = property(lambda self: 6)

    @property
    def specials(self) -> Dict[str, int]:
        return {t: i for i, t in enumerate(SPECIALS)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token

    def is_special(self, idx: int) -> bool:
        return idx < len(SPECIALS)

    def speaker_id(self, role: str) -> int:
        return self.token_to_id[SPEAKER_TAGS[role]]

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.id_to_token), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(lines)


def build_vocab(sentences: Iterable[Sequence[str]], max_size: int) -> Vocabulary:
    """Specials plus the most frequent tokens; ties go to the lexicographically smaller token."""
    sentences = list(sentences)
    if not sentences:
        raise ValueError("cannot build a vocabulary from no sentences")
    if max_size < len(SPECIALS):
        raise ValueError(f"max_size {max_size} is smaller than the {len(SPECIALS)} special tokens")
    counts = Counter(tok for sent in sentences for tok in sent if tok not in SPECIALS)
    ranked = sorted(counts, key=lambda t: (-counts[t], t))
    return Vocabulary(list(SPECIALS) + ranked[: max_size - len(SPECIALS)])


def encode(sentence: Sequence[str], v: Vocabulary) -> List[int]:
    unk = v.unk
    return [v.token_to_id.get(tok, unk) for tok in sentence]


def decode(ids: Sequence[int], v: Vocabulary) -> List[str]:
    n = len(v)
    out = []
    for i in ids:
        if not 0 <= int(i) < n:
            raise IndexError(f"token id {i} outside vocabulary of size {n}")
        out.append(v.id_to_token[int(i)])
    return out
