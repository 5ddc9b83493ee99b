"""Command-line pipeline: corpus, vocabulary, pretraining, fine-tuning, evaluation.

Exit codes: 0 success, 2 usage, 3 configuration, 4 input data,
5 checkpoint file, 6 filesystem, 7 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .evaluation import wer_bucket_report
from .forge import KeywordTask, NoiseConfig, build_corpus, load_lexicon, read_corpus, write_corpus
from .forge.lexicon import LexiconError
from .model import ClassCountMismatch, ModelConfig
from .tokenizer import PHONEME, WORD, JointVocabulary, VocabularyError, build_joint_vocab, train_bpe
from .trainer import (
    FINETUNE_MODES,
    PRETRAIN_MODES,
    MissingFieldError,
    RunConfig,
    build_sequences,
    finetune,
    params_from_checkpoint,
    predict,
    pretrain,
)

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4, 5, 6, 7

log = logging.getLogger("phonemlm")


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def _emit(args, payload: dict, text: str):
    print(json.dumps(payload, sort_keys=True) if args.json else text)


def _run_config(args, mode_choices) -> RunConfig:
    obj = _read_json(args.config) if args.config else {}
    for key in ("mode", "epochs", "batch_size", "lr", "max_len", "checkpoint_dir"):
        value = getattr(args, key, None)
        if value is not None:
            obj[key] = value
    if args.seed is not None:
        obj["seed"] = args.seed
    if "mode" not in obj:
        raise ConfigError("no mode given (use --mode or a run config file)")
    try:
        cfg = RunConfig.from_json(obj)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.mode not in mode_choices:
        raise ConfigError(f"mode {cfg.mode} not allowed here; choose from {', '.join(mode_choices)}")
    return cfg


def _model_config(args, vocab: JointVocabulary, cfg: RunConfig) -> ModelConfig:
    obj = _read_json(args.model_config) if args.model_config else {}
    obj.setdefault("max_positions", max(cfg.max_len, 4))
    obj["vocab_size"] = vocab.total_size
    obj.setdefault("seed", cfg.seed)
    known = {f.name for f in fields(ModelConfig)}
    if set(obj) - known:
        raise ConfigError(f"unknown model config keys {sorted(set(obj) - known)}")
    return ModelConfig(**obj)


def _lexicon(args):
    return load_lexicon(args.lexicon) if getattr(args, "lexicon", None) else load_lexicon()


# ---------------------------------------------------------------- commands


def cmd_build_corpus(args) -> int:
    lexicon = _lexicon(args)
    noise = _read_json(args.noise_config) if args.noise_config else {}
    if args.seed is not None:
        noise["seed"] = args.seed
    unknown = set(noise) - {f.name for f in fields(NoiseConfig)}
    if unknown:
        raise ConfigError(f"unknown noise config keys {sorted(unknown)}")
    cfg = NoiseConfig(**noise)
    if args.keyword_task:
        task = KeywordTask.from_lexicon(lexicon, seed=cfg.seed)
        items = task.sample(args.keyword_task, seed=cfg.seed)
    else:
        items = []
        lines = Path(args.input).read_text(encoding="utf-8").splitlines()
        for lineno, line in enumerate(lines, 1):
            if not line.strip():
                continue
            text, _, label = line.partition("\t")
            if label and not label.strip().isdigit():
                raise DataError(f"{args.input}:{lineno}: label {label!r} is not a non-negative integer")
            items.append((text, int(label)) if label else text)
    records, stats = build_corpus(items, cfg, lexicon, calibrate=not args.no_calibrate)
    if args.limit is not None:
        records = records[: args.limit]
    n = write_corpus(args.output, records)
    summary = stats.to_json() | {"written": n, "output": str(args.output)}
    _emit(args, summary, f"wrote {n} records to {args.output} (mean WER {stats.mean_wer:.4f}, mean PER {stats.mean_per:.4f}, "
                         f"{stats.rejected} rejected)")
    return EXIT_OK


def cmd_train_bpe(args) -> int:
    records = read_corpus(args.corpus)
    words = [r.asr_text for r in records]
    phonemes = [r.phoneme_seq for r in records if r.phoneme_seq]
    if args.mode in ("joint", WORD):
        word_model = train_bpe(words, args.word_merges, WORD)
    else:
        word_model = train_bpe([], 0, WORD)
    if args.mode in ("joint", PHONEME):
        phoneme_model = train_bpe(phonemes, args.phoneme_merges, PHONEME)
    else:
        phoneme_model = train_bpe([], 0, PHONEME)
    vocab = build_joint_vocab(word_model, phoneme_model)
    vocab.save(args.output)
    summary = {"total_size": vocab.total_size, "word_units": len(word_model), "phoneme_units": len(phoneme_model),
               "output": str(args.output)}
    _emit(args, summary, f"vocabulary of {vocab.total_size} ids ({len(word_model)} word, {len(phoneme_model)} phoneme) "
                         f"written to {args.output}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _run_config(args, PRETRAIN_MODES)
    vocab = JointVocabulary.load(args.vocab)
    corpus = read_corpus(args.corpus)
    resume = load_checkpoint(args.resume) if args.resume else None
    model_cfg = None if resume else _model_config(args, vocab, cfg)
    lexicon = _lexicon(args) if cfg.phoneme_source != "independent" else None

    def progress(step, epoch, breakdown):
        log.info("step %d epoch %d loss %.4f", step, epoch, breakdown.total)

    ckpt = pretrain(corpus, cfg, vocab, model_cfg, lexicon=lexicon, resume=resume, log=progress)
    save_checkpoint(ckpt, args.output)
    summary = {"steps": ckpt.step, "final_loss": ckpt.history[-1] if ckpt.history else None, "output": str(args.output)}
    _emit(args, summary, f"pretrained {ckpt.step} steps, checkpoint at {args.output}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _run_config(args, FINETUNE_MODES)
    vocab = JointVocabulary.load(args.vocab)
    ckpt = load_checkpoint(args.checkpoint) if args.checkpoint else None
    model_cfg = None if ckpt else _model_config(args, vocab, cfg)
    train = read_corpus(args.corpus)
    val = read_corpus(args.val) if args.val else None
    lexicon = _lexicon(args) if cfg.phoneme_source != "independent" else None
    result = finetune(ckpt, train, cfg, vocab, model_cfg, val_records=val, num_classes=args.num_classes,
                      lexicon=lexicon, log=lambda e, v: log.info("epoch %d val acc %.4f f1 %.4f", e, *v))
    result.checkpoint.meta["source_checkpoint"] = str(args.checkpoint) if args.checkpoint else None
    save_checkpoint(result.checkpoint, args.output)
    acc, f1 = result.val_history[result.best_epoch] if result.best_epoch >= 0 else (None, None)
    summary = {"best_epoch": result.best_epoch, "val_accuracy": acc, "val_macro_f1": f1, "output": str(args.output)}
    _emit(args, summary, f"best epoch {result.best_epoch} (val accuracy {acc}), checkpoint at {args.output}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.num_classes is None:
        raise ConfigError(f"{args.checkpoint} has no classifier head; fine-tune it first")
    vocab = JointVocabulary.load(args.vocab) if args.vocab else JointVocabulary.from_json(ckpt.vocab)
    run = dict(ckpt.meta.get("run_config") or {"mode": ckpt.mode})
    cfg = RunConfig.from_json(run)
    records = read_corpus(args.corpus)
    if not records:
        raise ConfigError(f"{args.corpus} holds no records")
    labels = [r.label for r in records]
    if any(lab is None for lab in labels):
        raise MissingFieldError(cfg.mode, "label", labels.index(None))
    if max(labels) + 1 > ckpt.num_classes:
        raise ClassCountMismatch(ckpt.num_classes, max(labels) + 1)
    lexicon = _lexicon(args) if cfg.phoneme_source != "independent" else None
    seqs = build_sequences(records, cfg, vocab, lexicon)
    preds = predict(params_from_checkpoint(ckpt), ckpt.model_config, seqs, num_classes=ckpt.num_classes)
    meta = {"mode": cfg.mode, "checkpoint": str(args.checkpoint), "seed": cfg.seed, "records": len(records)}
    report = wer_bucket_report([r.wer for r in records], preds, labels, ckpt.num_classes, meta)
    if args.report:
        Path(args.report).write_text(report.render() + "\n", encoding="utf-8")
    print(report.render() if args.json else report.table())
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="phonemlm", description="Joint word + phoneme masked-LM toolkit.")
    parser.add_argument("--seed", type=int, default=None, help="override every seed in the run")
    parser.add_argument("--json", action="store_true", help="print machine-readable JSON")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("build-corpus", help="forge a noisy parallel corpus")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="clean sentences, one per line, optional TAB label")
    src.add_argument("--keyword-task", type=int, metavar="N", help="sample N synthetic keyword-task sentences")
    p.add_argument("--output", required=True)
    p.add_argument("--lexicon", help="CMUdict-format file (default: shipped subset)")
    p.add_argument("--noise-config", help="JSON file of noise settings")
    p.add_argument("--no-calibrate", action="store_true")
    p.add_argument("--limit", type=int, help="keep at most this many records")
    p.set_defaults(func=cmd_build_corpus)

    p = sub.add_parser("train-bpe", help="train the joint word + phoneme vocabulary")
    p.add_argument("--corpus", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--mode", choices=("joint", WORD, PHONEME), default="joint",
                   help="which side(s) get merges; the other keeps its base alphabet")
    p.add_argument("--word-merges", type=int, default=None)
    p.add_argument("--phoneme-merges", type=int, default=None, help="default fills the 600-unit limit")
    p.set_defaults(func=cmd_train_bpe)

    for name, func, modes in (("pretrain", cmd_pretrain, PRETRAIN_MODES), ("finetune", cmd_finetune, FINETUNE_MODES)):
        p = sub.add_parser(name, help=f"{name} an encoder")
        p.add_argument("--corpus", required=True)
        p.add_argument("--vocab", required=True)
        p.add_argument("--output", required=True, help="checkpoint path")
        p.add_argument("--config", help="run config JSON")
        p.add_argument("--mode", choices=modes)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--max-len", dest="max_len", type=int)
        p.add_argument("--checkpoint-dir", dest="checkpoint_dir")
        p.add_argument("--model-config", help="model config JSON (ignored when starting from a checkpoint)")
        p.add_argument("--lexicon", help="needed for the g2p phoneme source")
        p.set_defaults(func=func)
        if name == "pretrain":
            p.add_argument("--resume", help="checkpoint to continue")
        else:
            p.add_argument("--checkpoint", help="pretrained encoder (omit for a random encoder)")
            p.add_argument("--val", help="validation corpus (default: hold out part of --corpus)")
            p.add_argument("--num-classes", type=int)

    p = sub.add_parser("evaluate", help="score a fine-tuned checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", help="default: the vocabulary stored in the checkpoint")
    p.add_argument("--report", help="write the JSON report here")
    p.add_argument("--lexicon")
    p.set_defaults(func=cmd_evaluate)
    return parser


# first match wins, so subclasses of ValueError precede the catch-all row
_ERRORS = (
    ((ClassCountMismatch, ConfigError, VocabularyError), EXIT_CONFIG, "config error"),
    ((DataError, MissingFieldError, LexiconError, KeyError, json.JSONDecodeError), EXIT_DATA, "data error"),
    (CheckpointError, EXIT_CHECKPOINT, "checkpoint error"),
    (OSError, EXIT_IO, "file error"),
    (FloatingPointError, EXIT_NUMERIC, "numerical error"),
    (ValueError, EXIT_CONFIG, "config error"),
)


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        for types, code, kind in _ERRORS:
            if isinstance(exc, types):
                print(f"phonemlm: {kind}: {exc}", file=sys.stderr)
                return code
        raise

if __name__ == "__main__":
    sys.exit(main())
