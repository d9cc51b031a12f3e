"""Command-line entry point: ``ctxst <command> [options]``.

Commands: gen-data, train, decode, evaluate, analyze. Exit codes are 0 on
success, 1 for usage or configuration errors and 2 for runtime failures.
Set ``CTXST_LOG`` (DEBUG, INFO, WARNING, ...) to change log verbosity.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from .config import ConfigError, ExperimentConfig, load_config

log = logging.getLogger("ctxst")

STRATEGIES = ("isolated", "exact", "multistage")
CONTEXTS = ("none", "gold", "hyp", "random")
SPLITS_FILE = "splits.txt"
LEXICON_FILE = "lexicon.pos"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _setup_logging() -> None:
    level = os.environ.get("CTXST_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.with_seed(args.seed)
    return cfg


def _corpus_splits(corpus_dir: Path):
    from .corpus import load_corpus, load_splits
    convs = load_corpus(corpus_dir)
    if not convs:
        raise FileNotFoundError(f"no conversations found in {corpus_dir}")
    manifest = corpus_dir / SPLITS_FILE
    if not manifest.exists():
        raise FileNotFoundError(f"missing split manifest {manifest}")
    train, dev, test = load_splits(convs, manifest)
    return convs, {"train": train, "dev": dev, "test": test}


# ------------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    from .corpus import build_lexicon, generate_synthetic, save_corpus, save_splits, split_corpus
    cfg = _config(args)
    out = Path(args.out or cfg.paths.corpus_dir)
    convs = generate_synthetic(cfg.generator)
    save_corpus(convs, out, lexicon=build_lexicon(cfg.generator).pos)
    save_splits(split_corpus(convs, cfg.split, seed=cfg.seed), out / SPLITS_FILE)
    print(f"wrote {len(convs)} conversations to {out}")
    return 0


def cmd_train(args) -> int:
    from .model import load_checkpoint, save_checkpoint
    from .train import build_vocabs, train
    cfg = _config(args)
    ctx = cfg.context
    if args.no_context:
        ctx.k = 0
    if args.k is not None:
        ctx.k = args.k
    if args.context_dropout is not None:
        ctx.dropout_p = args.context_dropout
    if args.speaker_mode is not None:
        ctx.speaker_mode = args.speaker_mode
    try:
        ctx.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    convs, splits = _corpus_splits(Path(args.corpus or cfg.paths.corpus_dir))
    out = Path(args.out or cfg.paths.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"context": {"k": ctx.k, "speaker_mode": ctx.speaker_mode, "dropout_p": ctx.dropout_p,
                        "truncation_limit": ctx.truncation_limit}, "seed": cfg.seed}
    if args.init_asr:
        asr, _ = load_checkpoint(args.init_asr)
    else:
        asr, _ = train(splits["train"], cfg.model, ctx, vocabs=build_vocabs(convs), stages=("asr",))
    save_checkpoint(out / "asr_pretrain.ckpt", asr, meta={**meta, "stage": "asr"})
    model, tlog = train(splits["train"], cfg.model, ctx, init=asr, stages=("st",))
    save_checkpoint(out / "final.ckpt", model, meta={**meta, "stage": "st"})
    tlog.write(out / "train.log")
    if not tlog.recombination_ok:
        log.warning("loss recombination check failed on at least one step")
    print(f"checkpoints in {out}; context dropout fired on {tlog.dropped_rate:.4f} of draws")
    return 0


def _resolve_context(args) -> str:
    context = args.context or ("hyp" if args.strategy in ("exact", "multistage") else "none")
    if args.strategy in ("exact", "multistage") and context != "hyp":
        raise UsageError(f"--strategy {args.strategy} decodes over the model's own predictions; "
                         f"use --context hyp (got {context})")
    if args.strategy == "isolated" and context == "hyp":
        raise UsageError("hypothesis context needs --strategy exact or multistage")
    if args.strategy == "isolated" and context == "none" and args.k is not None:
        log.warning("--k is ignored for isolated decoding without context")
    return context


def cmd_decode(args) -> int:
    from .decode import (decode_exact_corpus, decode_gold, decode_isolated, decode_multistage,
                         decode_random, write_decode_output)
    from .model import load_checkpoint
    from .train import derive_seed
    cfg = _config(args)
    context = _resolve_context(args)
    if args.k is not None:
        cfg.context.k = args.k
    if args.speaker_mode is not None:
        cfg.context.speaker_mode = args.speaker_mode
    cfg.context.source_mode = "hyp" if context == "hyp" else "gold"
    if args.beam is not None:
        cfg.decode.beam_size = args.beam
    if args.stages is not None:
        cfg.decode.stages = args.stages
    try:
        cfg.context.validate()
        cfg.decode.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    ckpt = Path(args.checkpoint or Path(cfg.paths.checkpoint_dir) / "final.ckpt")
    model, _ = load_checkpoint(ckpt)
    _, splits = _corpus_splits(Path(args.corpus or cfg.paths.corpus_dir))
    convs = splits[args.split]
    dc, jobs = cfg.decode, args.jobs
    if args.strategy == "isolated" and context == "none":
        out = decode_isolated(model, convs, dc, jobs)
    elif args.strategy == "isolated" and context == "gold":
        out = decode_gold(model, convs, cfg.context, dc, jobs)
    elif args.strategy == "isolated":
        out = decode_random(model, convs, cfg.context, dc, derive_seed(cfg.seed, "random-context") % 2**32, jobs)
    elif args.strategy == "exact":
        out = decode_exact_corpus(model, convs, cfg.context, dc, jobs)
    else:
        out = decode_multistage(model, convs, cfg.context, dc, jobs).final
    path = Path(args.output or Path(cfg.paths.output_dir) / f"{args.split}.{args.strategy}.{context}.hyp")
    path.parent.mkdir(parents=True, exist_ok=True)
    write_decode_output(path, out)
    print(f"wrote {len(out)} hypotheses to {path}")
    return 0


def _aligned(hyp_path: Path, refs: Dict[Tuple[str, int], List[str]]) -> List[List[str]]:
    from .decode import read_decode_output
    hyps = read_decode_output(hyp_path)
    missing = sorted(set(refs) - set(hyps))
    extra = sorted(set(hyps) - set(refs))
    if missing or extra:
        show = lambda ks: ", ".join(f"{c}:{i}" for c, i in ks[:10]) + (" ..." if len(ks) > 10 else "")  # noqa: E731
        parts = []
        if missing:
            parts.append(f"{len(missing)} utterances missing from {hyp_path}: {show(missing)}")
        if extra:
            parts.append(f"{len(extra)} utterances in {hyp_path} not in the reference split: {show(extra)}")
        raise ValueError("; ".join(parts))
    return [hyps[k][1] for k in sorted(refs)]


def _references(args, cfg):
    _, splits = _corpus_splits(Path(args.corpus or cfg.paths.corpus_dir))
    return {u.key: u.target_tokens for c in splits[args.split] for u in c.utterances}


def _emit(text: str, output: Optional[str]) -> None:
    if output:
        Path(output).parent.mkdir(parents=True, exist_ok=True)
        Path(output).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def cmd_evaluate(args) -> int:
    from .evaluate import corpus_bleu, format_report, paired_bootstrap
    cfg = _config(args)
    refs = _references(args, cfg)
    ref_list = [refs[k] for k in sorted(refs)]
    hyps = _aligned(Path(args.hyp), refs)
    sig = None
    if args.against:
        other = _aligned(Path(args.against), refs)
        sig = paired_bootstrap(hyps, other, ref_list, n_resamples=args.resamples, seed=cfg.seed)
    _emit(format_report(corpus_bleu(hyps, ref_list), sig), args.output)
    return 0


def cmd_analyze(args) -> int:
    from .corpus import load_lexicon
    from .evaluate import format_report, pos_f1, relative_improvement
    cfg = _config(args)
    refs = _references(args, cfg)
    ref_list = [refs[k] for k in sorted(refs)]
    a, b = _aligned(Path(args.hyp_a), refs), _aligned(Path(args.hyp_b), refs)
    lexicon = load_lexicon(args.lexicon or Path(args.corpus or cfg.paths.corpus_dir) / LEXICON_FILE)
    table_a, table_b = pos_f1(a, ref_list, lexicon), pos_f1(b, ref_list, lexicon)
    text = format_report(pos_tables={"a": table_a, "b": table_b},
                         improvements=relative_improvement(table_a, table_b, top_n=args.top))
    _emit(text, args.output)
    return 0


# --------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ctxst", description="Context-aware speech translation experiments.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    def common(sp, seed=True):
        sp.add_argument("--config", help="experiment config file (INI)")
        sp.add_argument("--corpus", help="corpus directory (overrides [paths] corpus_dir)")
        if seed:
            sp.add_argument("--seed", type=int, help="global seed (overrides [experiment] seed)")

    g = sub.add_parser("gen-data", help="generate the synthetic corpus")
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", help="output directory (overrides [paths] corpus_dir)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="ASR pretraining then ST fine-tuning")
    common(t)
    t.add_argument("--out", help="checkpoint directory (overrides [paths] checkpoint_dir)")
    t.add_argument("--no-context", action="store_true", help="train the context-free baseline (k=0)")
    t.add_argument("--k", type=int)
    t.add_argument("--context-dropout", type=float)
    t.add_argument("--speaker-mode", choices=("cross", "same"))
    t.add_argument("--init-asr", help="reuse this ASR-pretrained checkpoint and skip pretraining")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("decode", help="decode a split with a trained model")
    common(d)
    d.add_argument("--strategy", choices=STRATEGIES, default="isolated")
    d.add_argument("--context", choices=CONTEXTS)
    d.add_argument("--k", type=int)
    d.add_argument("--speaker-mode", choices=("cross", "same"))
    d.add_argument("--beam", type=int)
    d.add_argument("--stages", type=int)
    d.add_argument("--jobs", type=int, default=1)
    d.add_argument("--split", choices=("train", "dev", "test"), default="test")
    d.add_argument("--checkpoint")
    d.add_argument("--output")
    d.set_defaults(func=cmd_decode)

    e = sub.add_parser("evaluate", help="BLEU, optionally with paired bootstrap against a second system")
    common(e)
    e.add_argument("hyp")
    e.add_argument("--against")
    e.add_argument("--resamples", type=int, default=1000)
    e.add_argument("--split", choices=("train", "dev", "test"), default="test")
    e.add_argument("--output")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("analyze", help="per-POS F1 and relative improvement of system A over B")
    common(a)
    a.add_argument("hyp_a")
    a.add_argument("hyp_b")
    a.add_argument("--lexicon")
    a.add_argument("--top", type=int, default=5)
    a.add_argument("--split", choices=("train", "dev", "test"), default="test")
    a.add_argument("--output")
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse: --help (0) or usage error (1)
        return int(exc.code or 0)
    if getattr(args, "jobs", 1) is not None and getattr(args, "jobs", 1) < 1:
        print("ctxst: error: --jobs must be >= 1", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"ctxst: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure: report, nonzero exit
        log.debug("traceback", exc_info=True)
        print(f"ctxst: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
