"""Seeded desk-scale experiments on the synthetic corpus.

One shared ASR pretraining run feeds four ST fine-tunes:

* ``base``   - no context (k=0)
* ``ctx``    - k=2 cross-speaker context, context dropout 0.2
* ``ctx_p0`` - k=2 cross-speaker context, no context dropout
* ``same``   - k=2 same-speaker context, context dropout 0.2

Every test utterance is then decoded under the conditions the findings
compare. ``run_all`` returns a :class:`Results` with BLEU per condition,
homophone / pronoun accuracy, the bootstrap test and the POS analysis.

    python3 -m ctxst.experiments --workdir runs/desk
"""

from __future__ import annotations

import argparse
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional

from .context import ContextConfig
from .corpus import (GeneratorConfig, build_lexicon, generate_synthetic, save_corpus, save_splits,
                     split_corpus)
from .decode import (DecodeConfig, Hypothesis, decode_exact_corpus, decode_gold, decode_isolated,
                     decode_multistage, decode_random, write_decode_output)
from .evaluate import corpus_bleu, paired_bootstrap, pos_f1, relative_improvement, token_accuracy
from .model import Model, ModelConfig, load_checkpoint, save_checkpoint
from .train import build_vocabs, derive_seed, train

log = logging.getLogger(__name__)

# desk defaults for the synthetic corpus; see the decisions ledger for tuning notes
DESK_MODEL = dict(batch_size=16, pretrain_epochs=8, epochs=40, warmup_steps=300, learning_rate=3e-3,
                  dropout_rate=0.0, continuous_positions=False, average_last=10)

MODELS = {
    "base": ContextConfig(k=0, dropout_p=0.0),
    "ctx": ContextConfig(k=2, speaker_mode="cross", dropout_p=0.2),
    "ctx_p0": ContextConfig(k=2, speaker_mode="cross", dropout_p=0.0),
    "same": ContextConfig(k=2, speaker_mode="same", dropout_p=0.2),
}


@dataclass
class Results:
    bleu: Dict[str, float] = field(default_factory=dict)
    homophone_acc: Dict[str, Optional[float]] = field(default_factory=dict)
    pronoun_acc: Dict[str, Optional[float]] = field(default_factory=dict)
    p_value: float = 1.0
    top_gains: List[List] = field(default_factory=list)
    dropped_rate: Dict[str, float] = field(default_factory=dict)
    recombination_ok: bool = True
    seconds: Dict[str, float] = field(default_factory=dict)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=1, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Results":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def desk_model_config(seed: int = 0, **overrides) -> ModelConfig:
    return ModelConfig(**{**DESK_MODEL, **overrides, "seed": seed})


class Workbench:
    """Corpus, trained models and decode outputs under one working directory."""

    def __init__(self, workdir, seed: int = 0, gen: Optional[GeneratorConfig] = None,
                 model_cfg: Optional[ModelConfig] = None, decode_cfg: Optional[DecodeConfig] = None):
        self.root = Path(workdir)
        self.root.mkdir(parents=True, exist_ok=True)
        self.seed = seed
        self.gen = gen or GeneratorConfig(seed=seed)
        self.model_cfg = model_cfg or desk_model_config(seed)
        self.decode_cfg = decode_cfg or DecodeConfig()
        self.lexicon = build_lexicon(self.gen)
        self.convs = generate_synthetic(self.gen)
        self.train_convs, self.dev_convs, self.test_convs = split_corpus(self.convs, (0.8, 0.1, 0.1), seed)
        self.vocabs = build_vocabs(self.convs)
        self.models: Dict[str, Model] = {}
        self.logs: Dict[str, object] = {}
        self.seconds: Dict[str, float] = {}

    def write_corpus(self) -> Path:
        out = self.root / "corpus"
        save_corpus(self.convs, out, lexicon=self.lexicon.pos)
        save_splits((self.train_convs, self.dev_convs, self.test_convs), out / "splits.txt")
        return out

    def _timed(self, key, fn):
        t0 = time.perf_counter()
        out = fn()
        self.seconds[key] = self.seconds.get(key, 0.0) + time.perf_counter() - t0
        return out

    def asr(self) -> Model:
        if "asr" not in self.models:
            path = self.root / "asr_pretrain.ckpt"
            if path.exists():
                m, meta = load_checkpoint(path)
                self.seconds["train/asr"] = float(meta.get("seconds", 0.0))
                self.models["asr"] = m
            else:
                m, _ = self._timed("train/asr", lambda: train(
                    self.train_convs, self.model_cfg, MODELS["base"], vocabs=self.vocabs, stages=("asr",)))
                save_checkpoint(path, m, meta={"stage": "asr", "seconds": self.seconds["train/asr"]})
                self.models["asr"] = m
        return self.models["asr"]

    def model(self, name: str) -> Model:
        if name not in self.models:
            path = self.root / f"{name}.ckpt"
            if path.exists():
                m, meta = load_checkpoint(path)
                self.seconds[f"train/{name}"] = float(meta.get("seconds", 0.0))
                self.logs[name] = meta
            else:
                asr = self.asr()
                m, tlog = self._timed(f"train/{name}", lambda: train(
                    self.train_convs, self.model_cfg, MODELS[name], init=asr, stages=("st",)))
                meta = {"dropped_rate": tlog.dropped_rate, "recombination_ok": tlog.recombination_ok,
                        "seconds": self.seconds[f"train/{name}"]}
                tlog.write(self.root / f"{name}.train.log")
                save_checkpoint(path, m, meta=meta)
                self.logs[name] = meta
            self.models[name] = m
        return self.models[name]

    def decode(self, name: str, condition: str) -> Dict:
        """Decode the test split; ``condition`` in isolated|gold|random|exact|multistage."""
        m = self.model(name)
        ctx = MODELS[name]
        cfg, convs = self.decode_cfg, self.test_convs
        hyp = replace(ctx, source_mode="hyp", dropout_p=0.0)
        key = f"decode/{name}/{condition}"
        if condition == "isolated":
            run = lambda: decode_isolated(m, convs, cfg)  # noqa: E731
        elif condition == "gold":
            run = lambda: decode_gold(m, convs, ctx, cfg)  # noqa: E731
        elif condition == "random":
            run = lambda: decode_random(m, convs, ctx, cfg, seed=derive_seed(self.seed, "random-context") % 2**32)  # noqa: E731
        elif condition == "exact":
            run = lambda: decode_exact_corpus(m, convs, hyp, cfg)  # noqa: E731
        elif condition == "multistage":
            res = self._timed(key, lambda: decode_multistage(m, convs, hyp, replace(cfg, stages=1)))
            write_decode_output(self.root / f"{name}.stage0.hyp", res.stages[0])
            write_decode_output(self.root / f"{name}.multistage.hyp", res.final)
            return {"final": res.final, "stage0": res.stages[0]}
        else:
            raise ValueError(f"unknown condition {condition!r}")
        out = self._timed(key, run)
        write_decode_output(self.root / f"{name}.{condition}.hyp", out)
        return out

    def references(self) -> List[List[str]]:
        return [u.target_tokens for c in self.test_convs for u in c.utterances]

    def tokens(self, res: Dict[tuple, Hypothesis]) -> List[List[str]]:
        return [res[u.key].tokens for c in self.test_convs for u in c.utterances]


def run_all(workdir, seed: int = 0, **kw) -> Results:
    wb = Workbench(workdir, seed=seed, **kw)
    wb.write_corpus()
    refs = wb.references()
    homophones = [h.senses for h in wb.lexicon.homophones]
    pronouns = [("he", "she")]
    systems = {
        "base": wb.decode("base", "isolated"),
        "ctx_gold": wb.decode("ctx", "gold"),
        "ctx_random": wb.decode("ctx", "random"),
        "ctx_none": wb.decode("ctx", "isolated"),
        "ctx_p0_gold": wb.decode("ctx_p0", "gold"),
        "ctx_p0_none": wb.decode("ctx_p0", "isolated"),
        "ctx_exact": wb.decode("ctx", "exact"),
        "same_gold": wb.decode("same", "gold"),
    }
    ms = wb.decode("ctx", "multistage")
    systems["ctx_multistage"] = ms["final"]
    systems["ctx_stage0"] = ms["stage0"]
    res = Results()
    for name, out in systems.items():
        hyps = wb.tokens(out)
        res.bleu[name] = corpus_bleu(hyps, refs).bleu
        res.homophone_acc[name] = token_accuracy(hyps, refs, homophones)
        res.pronoun_acc[name] = token_accuracy(hyps, refs, pronouns)
    ctx_h, base_h = wb.tokens(systems["ctx_gold"]), wb.tokens(systems["base"])
    res.p_value = paired_bootstrap(ctx_h, base_h, refs, n_resamples=1000, seed=seed).p_value
    gains = relative_improvement(pos_f1(ctx_h, refs, wb.lexicon.pos), pos_f1(base_h, refs, wb.lexicon.pos))
    res.top_gains = [[t, g] for t, g in gains]
    res.dropped_rate = {n: float(wb.logs[n].get("dropped_rate", 0.0)) for n in MODELS if n in wb.logs}
    res.recombination_ok = all(bool(wb.logs[n].get("recombination_ok", True)) for n in wb.logs)
    res.seconds = dict(wb.seconds)
    res.save(Path(workdir) / "results.json")
    return res


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--workdir", default="runs/desk")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    res = run_all(args.workdir, seed=args.seed)
    print(json.dumps(asdict(res), indent=1, sort_keys=True))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
