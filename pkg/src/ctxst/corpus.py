"""Conversational 3-way corpora: data model, synthetic generator, and file I/O.

The synthetic generator plants two context-dependent phenomena:

* homophones: one source word with two translations. Its pseudo-acoustic
  frames are the same for both senses; the sense is fixed by a topic word in
  the preceding utterance's translation.
* pronouns: one source pronoun translated "he" or "she" after the gender of
  the name mentioned by the other speaker in the preceding utterance.

Speakers alternate, so the preceding utterance always belongs to the other
speaker and same-speaker context never carries the evidence.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

POS_TAGS = ("PRON", "PROPN", "INTJ", "PUNCT", "NOUN", "VERB")

_PRONOUNS = {"M": "he", "F": "she"}
_PUNCT = (".", "?", "!")
_INTJ = ("oh", "yeah", "well", "wow")
_NAMES = {"F": ("Maria", "Ana", "Lucia", "Elena"), "M": ("Juan", "Pedro", "Luis", "Diego")}
# (sense a, sense b, topic word selecting a, topic word selecting b)
_HOMOPHONES = (
    ("shore", "bank", "river", "money"),
    ("bat", "club", "cave", "baseball"),
    ("bark", "crust", "tree", "bread"),
    ("spring", "coil", "flowers", "mattress"),
    ("seal", "stamp", "ocean", "letter"),
    ("pitch", "tar", "music", "road"),
    ("match", "game", "fire", "team"),
    ("pen", "fence", "ink", "farm"),
)
_NOUNS = ("house", "car", "dog", "book", "city", "friend", "job", "school", "food", "street",
          "phone", "movie", "family", "weekend", "doctor", "beach", "coffee", "party", "kitchen",
          "garden", "train", "class", "store", "brother")
_VERBS = ("eat", "see", "go", "like", "want", "know", "work", "live", "call", "think", "buy",
          "study", "cook", "drive", "visit", "play", "read", "write", "sleep", "walk", "need",
          "remember", "watch", "travel")
_CONS = "bcdfglmnprstvz"
_VOWELS = "aeiou"


@dataclass
class Utterance:
    conversation_id: str
    index: int
    speaker: str
    source_tokens: List[str]
    target_tokens: List[str]
    target_pos: List[str]
    features: np.ndarray

    @property
    def key(self) -> Tuple[str, int]:
        return (self.conversation_id, self.index)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Utterance):
            return NotImplemented
        return (self.key == other.key and self.speaker == other.speaker
                and self.source_tokens == other.source_tokens
                and self.target_tokens == other.target_tokens
                and self.target_pos == other.target_pos
                and self.features.shape == other.features.shape
                and np.array_equal(self.features, other.features))


@dataclass
class Conversation:
    id: str
    utterances: List[Utterance] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.utterances)

    def __getitem__(self, i: int) -> Utterance:
        return self.utterances[i]

    def validate(self) -> None:
        for i, utt in enumerate(self.utterances):
            if utt.conversation_id != self.id:
                raise ValueError(f"utterance {i} belongs to {utt.conversation_id}, not {self.id}")
            if utt.index != i:
                raise ValueError(f"{self.id}: non-contiguous utterance index {utt.index} at position {i}")
            if len(utt.target_pos) != len(utt.target_tokens):
                raise ValueError(f"{self.id}:{i}: POS tags not aligned with target tokens")
            if utt.speaker not in ("A", "B"):
                raise ValueError(f"{self.id}:{i}: speaker must be A or B, got {utt.speaker!r}")


@dataclass
class GeneratorConfig:
    n_conversations: int = 200
    utterances_per_conversation: int = 10
    vocab_size_source: int = 58
    vocab_size_target: int = 60
    homophone_pairs: int = 4
    pronoun_fraction: float = 0.4
    homophone_fraction: float = 0.5
    frames_per_token: int = 4
    feature_dim: int = 16
    noise_std: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_conversations", "utterances_per_conversation", "vocab_size_source",
                     "vocab_size_target", "homophone_pairs", "frames_per_token", "feature_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"GeneratorConfig.{name} must be positive")
        if self.noise_std < 0:
            raise ValueError("GeneratorConfig.noise_std must be non-negative")
        for name in ("pronoun_fraction", "homophone_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"GeneratorConfig.{name} must lie in [0, 1]")


@dataclass
class Homophone:
    source: str
    senses: Tuple[str, str]
    topics: Tuple[str, str]


@dataclass
class SyntheticLexicon:
    """Everything the generator fixes once per seed."""

    pos: Dict[str, str]
    source_of: Dict[str, str]
    templates: Dict[str, np.ndarray]
    homophones: List[Homophone]
    pronoun_source: str
    names: Dict[str, Tuple[str, ...]]
    nouns: List[str]
    verbs: List[str]
    hesitations: List[str]

    def gender_of(self, name: str) -> str:
        return "F" if name in self.names["F"] else "M"

    def clean_features(self, source_tokens: Sequence[str]) -> np.ndarray:
        return np.concatenate([self.templates[t] for t in source_tokens], axis=0)


def _pseudo_words(rng: np.random.Generator, n: int, taken: set) -> List[str]:
    out = []
    while len(out) < n:
        syl = rng.integers(2, 4)
        w = "".join(_CONS[rng.integers(len(_CONS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    for _ in range(syl))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def build_lexicon(cfg: GeneratorConfig) -> SyntheticLexicon:
    cfg.validate()
    P = cfg.homophone_pairs
    fixed = len(_PRONOUNS) + len(_PUNCT) + len(_INTJ) + sum(len(v) for v in _NAMES.values())
    n_fill = cfg.vocab_size_target - fixed - 4 * P
    if n_fill < 4:
        raise ValueError(
            f"vocabulary too small to host {P} homophone pairs: vocab_size_target="
            f"{cfg.vocab_size_target} leaves {n_fill} filler words (need >= 4)")
    n_source_needed = cfg.vocab_size_target - P - 1
    if cfg.vocab_size_source < n_source_needed:
        raise ValueError(
            f"vocab_size_source={cfg.vocab_size_source} cannot host {n_source_needed} source words")

    rng = np.random.default_rng([cfg.seed, 0x1E81C0])
    taken = set(_NOUNS) | set(_VERBS) | set(_INTJ) | {w for h in _HOMOPHONES for w in h}
    homophone_words = list(_HOMOPHONES[:P])
    if P > len(_HOMOPHONES):
        extra = _pseudo_words(rng, 4 * (P - len(_HOMOPHONES)), taken)
        homophone_words += [tuple(extra[i:i + 4]) for i in range(0, len(extra), 4)]
    n_nouns = n_fill // 2
    n_verbs = n_fill - n_nouns
    nouns = list(_NOUNS[:n_nouns]) + _pseudo_words(rng, max(0, n_nouns - len(_NOUNS)), taken)
    verbs = list(_VERBS[:n_verbs]) + _pseudo_words(rng, max(0, n_verbs - len(_VERBS)), taken)

    pos: Dict[str, str] = {}
    for w in _PRONOUNS.values():
        pos[w] = "PRON"
    for w in _PUNCT:
        pos[w] = "PUNCT"
    for w in _INTJ:
        pos[w] = "INTJ"
    for names in _NAMES.values():
        for w in names:
            pos[w] = "PROPN"
    for h in homophone_words:
        for w in h:
            pos[w] = "NOUN"
    for w in nouns:
        pos[w] = "NOUN"
    for w in verbs:
        pos[w] = "VERB"

    src_taken = set(_PUNCT)
    plain = [w for w in pos if w not in _PUNCT and w not in _PRONOUNS.values()
             and not any(w in h[:2] for h in homophone_words)]
    src_words = _pseudo_words(rng, len(plain) + P + 1 + (cfg.vocab_size_source - n_source_needed),
                              src_taken)
    source_of = {w: w for w in _PUNCT}
    for w, s in zip(plain, src_words):
        source_of[w] = s
    rest = src_words[len(plain):]
    homophones = []
    for h, s in zip(homophone_words, rest[:P]):
        homophones.append(Homophone(source=s, senses=(h[0], h[1]), topics=(h[2], h[3])))
        source_of[h[0]] = s
        source_of[h[1]] = s
    pronoun_source = rest[P]
    for w in _PRONOUNS.values():
        source_of[w] = pronoun_source
    hesitations = rest[P + 1:]

    templates = {}
    for s in sorted(set(source_of.values()) | set(hesitations)):
        templates[s] = rng.standard_normal((cfg.frames_per_token, cfg.feature_dim))
    return SyntheticLexicon(pos=pos, source_of=source_of, templates=templates,
                            homophones=homophones, pronoun_source=pronoun_source,
                            names={k: tuple(v) for k, v in _NAMES.items()},
                            nouns=nouns, verbs=verbs, hesitations=hesitations)


def _balanced(rng: np.random.Generator, n: int) -> List[int]:
    """n binary labels, as even as possible, in random order."""
    labels = [i % 2 for i in range(n)]
    if n % 2 and rng.random() < 0.5:
        labels[-1] = 1
    return [labels[i] for i in rng.permutation(n)]


def _generate_conversation(cfg: GeneratorConfig, lex: SyntheticLexicon, ci: int) -> Conversation:
    rng = np.random.default_rng([cfg.seed, ci])
    n = cfg.utterances_per_conversation
    conv_id = f"conv{ci:04d}"
    P = len(lex.homophones)

    pair_at: List[Optional[int]] = [None] * n
    pron_at = [False] * n
    for i in range(1, n):
        if rng.random() < cfg.homophone_fraction:
            recent = {pair_at[j] for j in (i - 1, i - 2) if j >= 0}
            allowed = [k for k in range(P) if k not in recent]
            if allowed:
                pair_at[i] = allowed[rng.integers(len(allowed))]
        pron_at[i] = bool(rng.random() < cfg.pronoun_fraction)

    sense_at: Dict[int, int] = {}
    for k in range(P):
        where = [i for i in range(n) if pair_at[i] == k]
        for i, s in zip(where, _balanced(rng, len(where))):
            sense_at[i] = s
    gender_at: Dict[int, str] = {}
    where = [i for i in range(n) if pron_at[i]]
    for i, g in zip(where, _balanced(rng, len(where))):
        gender_at[i] = "MF"[g]

    utts = []
    for i in range(n):
        speaker = "AB"[i % 2]
        content = [(lex.nouns + lex.verbs)[rng.integers(len(lex.nouns) + len(lex.verbs))]
                   for _ in range(rng.integers(1, 4))]
        if pair_at[i] is not None:
            content.append(lex.homophones[pair_at[i]].senses[sense_at[i]])
        if pron_at[i]:
            content.append(_PRONOUNS[gender_at[i]])
        if i + 1 < n and pair_at[i + 1] is not None:
            content.append(lex.homophones[pair_at[i + 1]].topics[sense_at[i + 1]])
        if i + 1 < n and pron_at[i + 1]:
            names = lex.names[gender_at[i + 1]]
            content.append(names[rng.integers(len(names))])
        elif rng.random() < 0.2:
            names = lex.names["MF"[rng.integers(2)]]
            content.append(names[rng.integers(len(names))])
        content = [content[j] for j in rng.permutation(len(content))]
        target = ([_INTJ[rng.integers(len(_INTJ))]] if rng.random() < 0.3 else []) + content
        target.append(_PUNCT[rng.integers(len(_PUNCT))])
        source = [lex.source_of[w] for w in target]
        if lex.hesitations and rng.random() < 0.2:
            source.insert(int(rng.integers(len(source))), lex.hesitations[rng.integers(len(lex.hesitations))])
        clean = lex.clean_features(source)
        noisy = clean + cfg.noise_std * rng.standard_normal(clean.shape)
        feats = noisy.astype(np.float32).astype(np.float64)
        utts.append(Utterance(conv_id, i, speaker, source, target, [lex.pos[w] for w in target], feats))
    return Conversation(conv_id, utts)


def generate_synthetic(cfg: GeneratorConfig) -> List[Conversation]:
    """Deterministic synthetic corpus; conversation ``i`` is seeded by (seed, i)."""
    lex = build_lexicon(cfg)
    return [_generate_conversation(cfg, lex, ci) for ci in range(cfg.n_conversations)]


# ------------------------------------------------------------------------- I/O

def save_corpus(convs: Sequence[Conversation], path, lexicon: Optional[Dict[str, str]] = None) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for conv in convs:
        conv.validate()
        for ext, rows in (("src", [u.source_tokens for u in conv.utterances]),
                          ("tgt", [u.target_tokens for u in conv.utterances]),
                          ("pos", [u.target_pos for u in conv.utterances]),
                          ("spk", [[u.speaker] for u in conv.utterances])):
            (root / f"{conv.id}.{ext}").write_text("".join(" ".join(r) + "\n" for r in rows),
                                                   encoding="utf-8")
        with open(root / f"{conv.id}.feat", "wb") as fh:
            fh.write(struct.pack("<I", len(conv.utterances)))
            for u in conv.utterances:
                T, D = u.features.shape
                fh.write(struct.pack("<II", T, D))
                fh.write(u.features.astype("<f4").tobytes())
    if lexicon is not None:
        save_lexicon(lexicon, root / "lexicon.pos")


def save_lexicon(lexicon: Dict[str, str], path) -> None:
    Path(path).write_text("".join(f"{t} {lexicon[t]}\n" for t in sorted(lexicon)), encoding="utf-8")


def load_lexicon(path) -> Dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{n}: expected 'token TAG'")
        out[parts[0]] = parts[1]
    return out


def _read_lines(path: Path) -> List[str]:
    if not path.exists():
        raise FileNotFoundError(f"missing corpus file {path}")
    return path.read_text(encoding="utf-8").splitlines()


def _read_features(path: Path, n_expected: int) -> List[np.ndarray]:
    blob = path.read_bytes()
    if len(blob) < 4:
        raise ValueError(f"{path}: truncated header")
    (n,) = struct.unpack_from("<I", blob, 0)
    if n != n_expected:
        raise ValueError(f"{path}: header says {n} utterances, text files have {n_expected}")
    off = 4
    feats = []
    for i in range(n):
        if off + 8 > len(blob):
            raise ValueError(f"{path}: record {i}: truncated T/D header")
        T, D = struct.unpack_from("<II", blob, off)
        off += 8
        size = 4 * T * D
        if off + size > len(blob):
            raise ValueError(f"{path}: record {i}: payload shorter than T*D = {T}*{D} floats")
        feats.append(np.frombuffer(blob, dtype="<f4", count=T * D, offset=off)
                     .astype(np.float64).reshape(T, D))
        off += size
    if off != len(blob):
        raise ValueError(f"{path}: {len(blob) - off} trailing bytes after {n} records")
    return feats


def load_corpus(path) -> List[Conversation]:
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus directory {root} does not exist")
    convs = []
    for src_path in sorted(root.glob("*.src")):
        cid = src_path.stem
        src = _read_lines(src_path)
        tables = {"tgt": _read_lines(root / f"{cid}.tgt"),
                  "pos": _read_lines(root / f"{cid}.pos"),
                  "spk": _read_lines(root / f"{cid}.spk")}
        for ext, rows in tables.items():
            if len(rows) != len(src):
                line = min(len(rows), len(src)) + 1
                raise ValueError(f"{root / (cid + '.' + ext)}: line {line}: has {len(rows)} lines, "
                                 f"{src_path.name} has {len(src)}")
        feats = _read_features(root / f"{cid}.feat", len(src))
        utts = []
        for i, (s, t, p, k) in enumerate(zip(src, tables["tgt"], tables["pos"], tables["spk"])):
            tgt, pos = t.split(), p.split()
            if len(tgt) != len(pos):
                raise ValueError(f"{root / (cid + '.pos')}: line {i + 1}: {len(pos)} tags for "
                                 f"{len(tgt)} target tokens")
            utts.append(Utterance(cid, i, k.strip(), s.split(), tgt, pos, feats[i]))
        conv = Conversation(cid, utts)
        conv.validate()
        convs.append(conv)
    return convs


def split_corpus(convs: Sequence[Conversation], fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Split at conversation granularity into (train, dev, test)."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(convs)
    nonzero = [i for i, f in enumerate(fractions) if f > 0]
    if n < len(nonzero):
        raise ValueError(f"{n} conversations cannot fill {len(nonzero)} non-empty splits")
    counts = [int(round(f * n)) for f in fractions]
    counts[nonzero[-1]] += n - sum(counts)
    for i in nonzero:
        while counts[i] < 1:
            donor = max(range(3), key=lambda j: counts[j])
            counts[donor] -= 1
            counts[i] += 1
    order = np.random.default_rng([seed, 0x5B117]).permutation(n)
    out, start = [], 0
    for c in counts:
        out.append([convs[j] for j in sorted(order[start:start + c])])
        start += c
    return tuple(out)


def save_splits(splits, path) -> None:
    lines = []
    for name, part in zip(("train", "dev", "test"), splits):
        lines += [f"{name} {c.id}\n" for c in part]
    Path(path).write_text("".join(lines), encoding="utf-8")


def load_splits(convs: Sequence[Conversation], path):
    by_id = {c.id: c for c in convs}
    parts = {"train": [], "dev": [], "test": []}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        name, cid = line.split()
        if cid not in by_id:
            raise ValueError(f"{path}:{n}: unknown conversation {cid}")
        parts[name].append(by_id[cid])
    return parts["train"], parts["dev"], parts["test"]
