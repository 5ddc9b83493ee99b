"""Pretraining and fine-tuning loops for every experiment configuration.

All randomness is derived from ``(seed, stream, counter)`` triples, so a run
resumed from a checkpoint at step ``k`` replays exactly the batches, masks
and dropout patterns of the uninterrupted run.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .batcher import (
    MaskedRow,
    apply_masking,
    assemble_phoneme_only,
    assemble_sequence,
    collate_batch,
    unmasked_row,
)
from .checkpoint import Checkpoint, save_checkpoint
from .engine import Adam, AdamState, Tensor, softmax_cross_entropy, warmup_linear
from .evaluation import evaluate_metrics
from .forge.corpus import CorpusRecord
from .forge.lexicon import Lexicon, g2p
from .model import (
    ALL_TERMS,
    JOINT_TERM,
    PHONEME_TERM,
    WORD_TERM,
    ClassCountMismatch,
    LossBreakdown,
    ModelConfig,
    classify_forward,
    init_classifier,
    init_params,
    joint_pretrain_loss,
)
from .tokenizer import PAD_ID, PHONEME, WORD, JointVocabulary

PRETRAIN_WORD_ONLY = "pretrain_word_only"
PRETRAIN_JOINT = "pretrain_joint"
PRETRAIN_JOINT_NO_JOINT_LOSS = "pretrain_joint_no_joint_loss"
PRETRAIN_JOINT_G2P_ON_ASR = "pretrain_joint_g2p_on_asr"
FINETUNE_JOINT = "finetune_joint"
FINETUNE_WORD_ONLY = "finetune_word_only"
FINETUNE_PHONEME_ONLY = "finetune_phoneme_only"
FINETUNE_CLEAN = "finetune_clean"

PRETRAIN_MODES = (PRETRAIN_WORD_ONLY, PRETRAIN_JOINT, PRETRAIN_JOINT_NO_JOINT_LOSS, PRETRAIN_JOINT_G2P_ON_ASR)
FINETUNE_MODES = (FINETUNE_JOINT, FINETUNE_WORD_ONLY, FINETUNE_PHONEME_ONLY, FINETUNE_CLEAN)
MODES = PRETRAIN_MODES + FINETUNE_MODES

INDEPENDENT, G2P_ASR = "independent", "g2p_asr"

LOSS_TERMS = {
    PRETRAIN_WORD_ONLY: (WORD_TERM,),
    PRETRAIN_JOINT: ALL_TERMS,
    PRETRAIN_JOINT_NO_JOINT_LOSS: (WORD_TERM, PHONEME_TERM),
    PRETRAIN_JOINT_G2P_ON_ASR: ALL_TERMS,
}

# RNG streams
_MASK, _DROPOUT, _SHUFFLE, _SPLIT, _HEAD = 1, 2, 3, 4, 5


class MissingFieldError(ValueError):
    def __init__(self, mode: str, field_name: str, index):
        super().__init__(f"mode {mode} needs field {field_name!r}, missing in record {index}")
        self.mode, self.field = mode, field_name


@dataclass
class RunConfig:
    """One training run. ``None`` epochs/lr pick the mode's default."""

    mode: str
    epochs: int | None = None
    batch_size: int = 32
    lr: float | None = None
    warmup_fraction: float = 0.1
    val_fraction: float = 0.20
    seed: int = 0
    checkpoint_dir: str | None = None
    checkpoint_every: int = 0
    max_len: int = 128
    mask_prob: float = 0.15
    phoneme_source: str = INDEPENDENT

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {', '.join(MODES)}")
        if self.mode == PRETRAIN_JOINT_G2P_ON_ASR:
            self.phoneme_source = G2P_ASR
        if self.phoneme_source not in (INDEPENDENT, G2P_ASR):
            raise ValueError(f"unknown phoneme_source {self.phoneme_source!r}")
        if self.epochs is None:
            self.epochs = 50 if self.is_pretrain else 20
        if self.lr is None:
            self.lr = 3e-4 if self.is_pretrain else 3e-5
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr > 0 required")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")

    @property
    def is_pretrain(self) -> bool:
        return self.mode in PRETRAIN_MODES

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown run config keys {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class Experiment:
    """A table row: optional pretraining mode, then a fine-tuning mode."""

    name: str
    pretrain_mode: str | None
    finetune_mode: str
    phoneme_source: str = INDEPENDENT


EXPERIMENTS = {
    e.name: e
    for e in (
        Experiment("Oracle", None, FINETUNE_CLEAN),
        Experiment("B1", None, FINETUNE_WORD_ONLY),
        Experiment("B2", PRETRAIN_WORD_ONLY, FINETUNE_WORD_ONLY),
        Experiment("B3", PRETRAIN_JOINT_G2P_ON_ASR, FINETUNE_JOINT, G2P_ASR),
        Experiment("PhonemeBERT", PRETRAIN_JOINT, FINETUNE_JOINT),
        Experiment("A1", PRETRAIN_JOINT, FINETUNE_WORD_ONLY),
        Experiment("A2", PRETRAIN_JOINT, FINETUNE_PHONEME_ONLY),
        Experiment("A3", PRETRAIN_JOINT_NO_JOINT_LOSS, FINETUNE_JOINT),
    )
}


def experiment_configs(name: str, **overrides) -> tuple[RunConfig | None, RunConfig]:
    e = EXPERIMENTS[name]
    pre = None if e.pretrain_mode is None else RunConfig(mode=e.pretrain_mode, **overrides)
    fine = RunConfig(mode=e.finetune_mode, phoneme_source=e.phoneme_source, **overrides)
    return pre, fine


# ---------------------------------------------------------------- inputs


def _uses_words(mode: str) -> bool:
    return mode != FINETUNE_PHONEME_ONLY


def _uses_phonemes(mode: str) -> bool:
    return mode not in (PRETRAIN_WORD_ONLY, FINETUNE_WORD_ONLY, FINETUNE_CLEAN)


def required_fields(cfg: RunConfig) -> list[str]:
    req = []
    if cfg.mode == FINETUNE_CLEAN:
        req.append("clean_text")
    elif _uses_words(cfg.mode) or cfg.phoneme_source == G2P_ASR:
        req.append("asr_text")
    if _uses_phonemes(cfg.mode) and cfg.phoneme_source == INDEPENDENT:
        req.append("phoneme_seq")
    if not cfg.is_pretrain:
        req.append("label")
    return req


def check_fields(records: Sequence[CorpusRecord], cfg: RunConfig):
    req = required_fields(cfg)
    for i, rec in enumerate(records):
        for name in req:
            if getattr(rec, name) is None:
                raise MissingFieldError(cfg.mode, name, rec.index if rec.index is not None else i)


def record_ids(rec: CorpusRecord, cfg: RunConfig, vocab: JointVocabulary, lexicon: Lexicon | None):
    """(word ids, phoneme ids) that the mode's layout consumes."""
    words: list[int] = []
    phonemes: list[int] = []
    if _uses_words(cfg.mode):
        words = vocab.encode(rec.clean_text if cfg.mode == FINETUNE_CLEAN else rec.asr_text, WORD)
    if _uses_phonemes(cfg.mode):
        if cfg.phoneme_source == G2P_ASR:
            if lexicon is None:
                raise ValueError("g2p phoneme source needs a lexicon")
            seq = " ".join(g2p(rec.asr_text, lexicon))
        else:
            seq = rec.phoneme_seq
        phonemes = vocab.encode(seq, PHONEME)
    return words, phonemes


def build_sequences(records, cfg: RunConfig, vocab: JointVocabulary, lexicon: Lexicon | None = None):
    check_fields(records, cfg)
    out = []
    for rec in records:
        words, phonemes = record_ids(rec, cfg, vocab, lexicon)
        if cfg.mode == FINETUNE_PHONEME_ONLY:
            out.append(assemble_phoneme_only(phonemes, vocab, cfg.max_len))
        else:
            out.append(assemble_sequence(words, phonemes, vocab, cfg.max_len))
    return out


def _rng(seed: int, stream: int, counter: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, counter])


def _tensors(arrays: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(np.array(v, dtype=np.float32), requires_grad=True, name=k) for k, v in arrays.items()}


def _arrays(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in params.items()}


def _copy_state(state: AdamState) -> AdamState:
    return AdamState(
        lr=state.lr, beta1=state.beta1, beta2=state.beta2, eps=state.eps, step=state.step,
        first_moment={k: v.copy() for k, v in state.first_moment.items()},
        second_moment={k: v.copy() for k, v in state.second_moment.items()},
    )


# ---------------------------------------------------------------- pretraining


def pretrain(
    corpus: Sequence[CorpusRecord],
    cfg: RunConfig,
    vocab: JointVocabulary,
    model_cfg: ModelConfig | None = None,
    lexicon: Lexicon | None = None,
    resume: Checkpoint | None = None,
    until_step: int | None = None,
    log=None,
) -> Checkpoint:
    """Masked-LM pretraining with the mode's loss terms.

    ``until_step`` stops early (for interrupted runs); ``resume`` continues
    a checkpoint produced by the same configuration.
    """
    if not cfg.is_pretrain:
        raise ValueError(f"{cfg.mode} is not a pretraining mode")
    corpus = list(corpus)
    if not corpus:
        raise ValueError("empty pretraining corpus")
    seqs = build_sequences(corpus, cfg, vocab, lexicon)
    if resume is not None:
        model_cfg = resume.model_config
        params = _tensors(resume.params)
        state = _copy_state(resume.optimizer)
        step, history = resume.step, list(resume.history)
    else:
        model_cfg = model_cfg or ModelConfig(vocab_size=vocab.total_size, max_positions=max(cfg.max_len, 4))
        params = init_params(model_cfg)
        state = None
        step, history = 0, []
    if model_cfg.vocab_size != vocab.total_size:
        raise ValueError(f"model vocab_size {model_cfg.vocab_size} != vocabulary size {vocab.total_size}")
    opt = Adam(params, lr=cfg.lr, state=state)
    terms = LOSS_TERMS[cfg.mode]
    n = len(seqs)
    per_epoch = math.ceil(n / cfg.batch_size)
    total = per_epoch * cfg.epochs
    stop = total if until_step is None else min(total, until_step)

    order, order_epoch = None, -1
    while step < stop:
        epoch, b = divmod(step, per_epoch)
        if epoch != order_epoch:
            order, order_epoch = _rng(cfg.seed, _SHUFFLE, epoch).permutation(n), epoch
        idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
        mask_rng = _rng(cfg.seed, _MASK, step)
        rows = [apply_masking(seqs[i], vocab, cfg.mask_prob, rng=mask_rng) for i in idx]
        breakdown = joint_pretrain_loss(rows, params, model_cfg, vocab, terms, train=True,
                                        rng=_rng(cfg.seed, _DROPOUT, step))
        lr = warmup_linear(step, total, cfg.lr, cfg.warmup_fraction)
        opt.zero_grad()
        if not breakdown.skipped:
            breakdown.total_tensor.backward()
            opt.step(lr)
        history.append(breakdown.total)
        step += 1
        if log is not None:
            log(step, epoch, breakdown)
        if cfg.checkpoint_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0 and step < stop:
            save_checkpoint(_pretrain_ckpt(params, opt.state, model_cfg, cfg, step, per_epoch, history, vocab),
                            Path(cfg.checkpoint_dir) / f"{cfg.mode}-step{step}.pbrt")
    ckpt = _pretrain_ckpt(params, opt.state, model_cfg, cfg, step, per_epoch, history, vocab)
    if cfg.checkpoint_dir:
        save_checkpoint(ckpt, Path(cfg.checkpoint_dir) / f"{cfg.mode}.pbrt")
    return ckpt


def _pretrain_ckpt(params, state, model_cfg, cfg, step, per_epoch, history, vocab) -> Checkpoint:
    return Checkpoint(
        model_config=model_cfg,
        params=_arrays(params),
        optimizer=_copy_state(state),
        rng_state={"seed": cfg.seed, "streams": {"mask": _MASK, "dropout": _DROPOUT, "shuffle": _SHUFFLE}, "next_step": step},
        step=step,
        epoch=step // per_epoch,
        mode=cfg.mode,
        vocab=vocab.to_json(),
        history=list(history),
        meta={"run_config": cfg.to_json()},
    )


# ---------------------------------------------------------------- fine-tuning


@dataclass
class FinetuneResult:
    checkpoint: Checkpoint
    best_epoch: int
    val_history: list[tuple[float, float]] = field(default_factory=list)
    test_metrics: tuple[float, float] | None = None
    test_predictions: np.ndarray | None = None
    train_losses: list[float] = field(default_factory=list)


def split_train_val(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle; the last ``val_fraction`` of it is the validation part."""
    order = _rng(seed, _SPLIT, 0).permutation(n)
    n_val = max(1, int(round(n * val_fraction)))
    if n_val >= n:
        raise ValueError(f"{n} records cannot be split into train and validation")
    return order[: n - n_val], order[n - n_val:]


def _label_count(records, num_classes):
    labels = [r.label for r in records]
    top = max(labels) + 1
    if num_classes is None:
        return top
    if top > num_classes or min(labels) < 0:
        raise ClassCountMismatch(num_classes, top)
    return num_classes


def predict(params, model_cfg: ModelConfig, seqs, batch_size: int = 64, num_classes=None) -> np.ndarray:
    preds = []
    for lo in range(0, len(seqs), batch_size):
        batch = collate_batch([unmasked_row(s) for s in seqs[lo:lo + batch_size]], PAD_ID)
        logits = classify_forward(batch, params, model_cfg, num_classes)
        preds.append(np.argmax(logits.data, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def finetune(
    checkpoint: Checkpoint | None,
    train_records: Sequence[CorpusRecord],
    cfg: RunConfig,
    vocab: JointVocabulary,
    model_cfg: ModelConfig | None = None,
    test_records: Sequence[CorpusRecord] | None = None,
    val_records: Sequence[CorpusRecord] | None = None,
    num_classes: int | None = None,
    lexicon: Lexicon | None = None,
    max_steps: int | None = None,
    log=None,
) -> FinetuneResult:
    """Classifier fine-tuning with best-validation selection.

    ``checkpoint=None`` starts from a randomly initialised encoder. Without
    ``val_records`` the last ``val_fraction`` of a seeded shuffle of the
    training records is held out. ``max_steps`` caps the optimisation steps.
    """
    if cfg.is_pretrain:
        raise ValueError(f"{cfg.mode} is not a fine-tuning mode")
    train_records = list(train_records)
    if not train_records:
        raise ValueError("empty fine-tuning corpus")
    check_fields(train_records, cfg)
    all_records = train_records + list(val_records or []) + list(test_records or [])
    check_fields(all_records, cfg)
    num_classes = _label_count(all_records, num_classes)

    if checkpoint is not None:
        model_cfg = checkpoint.model_config
        encoder = {k: v for k, v in checkpoint.params.items() if not k.startswith("cls_")}
        params = _tensors(encoder)
    else:
        model_cfg = model_cfg or ModelConfig(vocab_size=vocab.total_size, max_positions=max(cfg.max_len, 4), seed=cfg.seed)
        params = init_params(model_cfg)
    if model_cfg.vocab_size != vocab.total_size:
        raise ValueError(f"model vocab_size {model_cfg.vocab_size} != vocabulary size {vocab.total_size}")
    params.update(init_classifier(model_cfg, num_classes, seed=cfg.seed))

    seqs = build_sequences(train_records, cfg, vocab, lexicon)
    labels = np.array([r.label for r in train_records], dtype=np.int64)
    if val_records is None:
        tr, va = split_train_val(len(seqs), cfg.val_fraction, cfg.seed)
        val_seqs, val_labels = [seqs[i] for i in va], labels[va]
        seqs, labels = [seqs[i] for i in tr], labels[tr]
    else:
        val_seqs = build_sequences(val_records, cfg, vocab, lexicon)
        val_labels = np.array([r.label for r in val_records], dtype=np.int64)

    opt = Adam(params, lr=cfg.lr)
    n = len(seqs)
    per_epoch = math.ceil(n / cfg.batch_size)
    total = per_epoch * cfg.epochs
    if max_steps is not None:
        total = min(total, max_steps)
    best = None
    best_params = _arrays(params)
    val_history, losses = [], []
    step = 0
    for epoch in range(cfg.epochs):
        if step >= total:
            break
        order = _rng(cfg.seed, _SHUFFLE, epoch).permutation(n)
        for b in range(per_epoch):
            if step >= total:
                break
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            batch = collate_batch([unmasked_row(seqs[i]) for i in idx], PAD_ID)
            logits = classify_forward(batch, params, model_cfg, num_classes, train=True,
                                      rng=_rng(cfg.seed, _DROPOUT, step))
            loss = softmax_cross_entropy(logits, labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step(warmup_linear(step, total, cfg.lr, cfg.warmup_fraction))
            losses.append(float(loss.data))
            step += 1
        val = evaluate_metrics(predict(params, model_cfg, val_seqs), val_labels, num_classes)
        val_history.append(val)
        if log is not None:
            log(epoch, val)
        # ties on accuracy go to macro-F1, then to the earlier epoch
        if best is None or val > best[0]:
            best = (val, epoch)
            best_params = _arrays(params)
    params = _tensors(best_params)
    best_val, best_epoch = best if best is not None else ((None, None), -1)
    ckpt = Checkpoint(
        model_config=model_cfg,
        params=_arrays(params),
        rng_state={"seed": cfg.seed},
        step=step,
        epoch=best_epoch,
        best_val=best_val[0],
        mode=cfg.mode,
        num_classes=num_classes,
        vocab=vocab.to_json(),
        history=losses,
        meta={"run_config": cfg.to_json(), "best_macro_f1": best_val[1]},
    )
    if cfg.checkpoint_dir:
        save_checkpoint(ckpt, Path(cfg.checkpoint_dir) / f"{cfg.mode}.pbrt")
    result = FinetuneResult(ckpt, best_epoch, val_history, train_losses=losses)
    if test_records is not None:
        test_seqs = build_sequences(test_records, cfg, vocab, lexicon)
        preds = predict(params, model_cfg, test_seqs)
        gold = np.array([r.label for r in test_records], dtype=np.int64)
        result.test_predictions = preds
        result.test_metrics = evaluate_metrics(preds, gold, num_classes)
    return result


def params_from_checkpoint(ckpt: Checkpoint) -> dict[str, Tensor]:
    return _tensors(ckpt.params)
