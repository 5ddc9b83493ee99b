"""Parallel (ASR transcript, phoneme sequence) corpus generation and I/O."""
from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from itertools import islice
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .channels import (
    PHONEME_STREAM,
    WORD_STREAM,
    ConfusionClasses,
    InsertionPool,
    NoiseConfig,
    apply_phoneme_errors,
    apply_word_errors,
    default_confusion_classes,
    phoneme_noise_channel,
    word_noise_channel,
)
from .lexicon import PAUSE, Lexicon, g2p, tokenize_words
from .wer import compute_per, compute_wer, edit_distance

log = logging.getLogger(__name__)

LEVEL_STREAM = 2
PILOT_SIZE = 1000
WER_BUCKETS = (("<10", 0.0, 0.10), ("10-20", 0.10, 0.20), ("20-30", 0.20, 0.30), ("30+", 0.30, float("inf")))


@dataclass
class CorpusRecord:
    clean_text: str | None
    asr_text: str
    phoneme_seq: str | None
    wer: float | None
    label: int | None = None
    index: int | None = None

    @property
    def phonemes(self) -> list[str]:
        return self.phoneme_seq.split() if self.phoneme_seq else []

    def to_json(self) -> dict:
        out = {"clean": self.clean_text, "asr": self.asr_text, "phoneme": self.phoneme_seq, "wer": self.wer}
        if self.label is not None:
            out["label"] = self.label
        if self.index is not None:
            out["id"] = self.index
        return {k: v for k, v in out.items() if v is not None}

    @classmethod
    def from_json(cls, obj: dict) -> "CorpusRecord":
        if "asr" not in obj:
            raise KeyError("corpus record lacks required key 'asr'")
        return cls(
            clean_text=obj.get("clean"),
            asr_text=obj["asr"],
            phoneme_seq=obj.get("phoneme"),
            wer=obj.get("wer"),
            label=obj.get("label"),
            index=obj.get("id"),
        )


@dataclass
class CorpusStats:
    inputs: int = 0
    emitted: int = 0
    rejected_low: int = 0
    rejected_high: int = 0
    rejected_empty: int = 0
    high_noise: int = 0
    mean_wer: float = 0.0
    mean_per: float = 0.0
    histogram: dict = field(default_factory=lambda: {name: 0 for name, _, _ in WER_BUCKETS})
    word_scale: float = 1.0
    phoneme_scale: float = 1.0
    config: NoiseConfig | None = None

    @property
    def rejected(self) -> int:
        return self.rejected_low + self.rejected_high + self.rejected_empty

    def to_json(self) -> dict:
        out = dict(self.__dict__)
        out["rejected"] = self.rejected
        out["config"] = asdict(self.config) if self.config else None
        return out


def normalize_text(text: str) -> str:
    return " ".join(tokenize_words(text))


def derive_seed(global_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([global_seed, index]).generate_state(1, np.uint64)[0])


def uses_high_noise(cfg: NoiseConfig, index: int) -> bool:
    return np.random.default_rng([cfg.seed, index, LEVEL_STREAM]).random() < cfg.high_noise_share


def record_config(cfg: NoiseConfig, index: int) -> NoiseConfig:
    """Noise level and derived seed used for input number ``index``."""
    level = cfg.high_level() if uses_high_noise(cfg, index) else cfg
    return replace(level, seed=derive_seed(cfg.seed, index))


def bucket_of(wer: float) -> str:
    for name, lo, hi in WER_BUCKETS:
        if lo <= wer < hi:
            return name
    raise ValueError(f"WER {wer} outside every bucket")


def forge_record(
    text: str,
    index: int,
    cfg: NoiseConfig,
    lexicon: Lexicon,
    pool: InsertionPool | None = None,
    classes: ConfusionClasses | None = None,
    label: int | None = None,
) -> tuple[CorpusRecord, float]:
    """One noisy record (unfiltered) and its phoneme error rate."""
    rcfg = record_config(cfg, index)
    asr = word_noise_channel(text, rcfg, lexicon, pool)
    clean_ph = g2p(text, lexicon)
    noisy_ph = phoneme_noise_channel(clean_ph, rcfg, classes)
    rec = CorpusRecord(
        clean_text=text,
        asr_text=asr,
        phoneme_seq=" ".join(noisy_ph),
        wer=compute_wer(text, asr),
        label=label,
        index=index,
    )
    per = compute_per(clean_ph, noisy_ph) if clean_ph else 0.0
    return rec, per


def _bisect_scale(measure, target: float, hi: float, iters: int = 16) -> float:
    lo = 0.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if measure(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _pilot_draws(cfg: NoiseConfig, lengths: list[int], stream: int):
    """Per-record (is_high, draws) fixed across calibration steps."""
    out = []
    for i, n in enumerate(lengths):
        seed = derive_seed(cfg.seed, i)
        out.append((uses_high_noise(cfg, i), np.random.default_rng([seed, stream]).random((n, 2))))
    return out


def calibrate_word_rates(
    sentences: list[str],
    cfg: NoiseConfig,
    lexicon: Lexicon,
    pool: InsertionPool | None = None,
    filtered: bool = True,
    target: float | None = None,
) -> float:
    """Scale factor on the word rates that hits ``target`` mean WER on a pilot.

    With ``filtered`` the mean is taken over records that survive the
    [wer_floor, wer_ceiling] band, which is what the emitted corpus reports.
    Uses the same per-record random draws as :func:`build_corpus`.
    """
    target = cfg.target_mean_wer if target is None else target
    if sum(cfg.word_rates) == 0:
        return 1.0
    pool = pool or InsertionPool.from_lexicon(lexicon)
    split = [t.split() for t in sentences]
    pilot = _pilot_draws(cfg, [len(w) for w in split], WORD_STREAM)

    def measure(scale):
        scaled = cfg.scaled(word=scale)
        levels = (scaled.word_rates, scaled.high_level().word_rates)
        wers, too_high = [], 0
        for words, (high, draws) in zip(split, pilot):
            hyp = apply_word_errors(words, draws, levels[high], lexicon, pool)
            w = edit_distance(words, hyp) / len(words)
            if not filtered or cfg.wer_floor <= w <= cfg.wer_ceiling:
                wers.append(w)
            else:
                too_high += w > cfg.wer_ceiling
        if not wers:
            return float("inf") if too_high else 0.0
        return float(np.mean(wers))

    return _bisect_scale(measure, target, hi=1.0 / sum(cfg.word_rates))


def calibrate_phoneme_rates(
    phoneme_seqs: list[list[str]],
    cfg: NoiseConfig,
    classes: ConfusionClasses | None = None,
    target: float | None = None,
) -> float:
    """Scale factor on the phoneme rates that hits ``target`` mean PER."""
    target = cfg.target_mean_per if target is None else target
    if sum(cfg.phoneme_rates) == 0:
        return 1.0
    classes = classes or default_confusion_classes()
    pilot = _pilot_draws(cfg, [len(s) for s in phoneme_seqs], PHONEME_STREAM)

    def measure(scale):
        scaled = cfg.scaled(phoneme=scale)
        levels = (scaled.phoneme_rates, scaled.high_level().phoneme_rates)
        pers = [
            compute_per(seq, apply_phoneme_errors(seq, draws, levels[high], classes))
            for seq, (high, draws) in zip(phoneme_seqs, pilot)
            if seq
        ]
        return float(np.mean(pers))

    return _bisect_scale(measure, target, hi=1.0 / sum(cfg.phoneme_rates))


def _split_item(item) -> tuple[str, int | None]:
    if isinstance(item, str):
        return item, None
    text, label = item
    return text, label


def build_corpus(
    clean_sentences: Iterable,
    cfg: NoiseConfig,
    lexicon: Lexicon,
    calibrate: bool = True,
    pilot_size: int = PILOT_SIZE,
    classes: ConfusionClasses | None = None,
) -> tuple[list[CorpusRecord], CorpusStats]:
    """Noisy parallel corpus from clean sentences (str or (str, label) items).

    Records whose WER falls outside [wer_floor, wer_ceiling] are dropped and
    counted. A ``high_noise_share`` fraction of inputs uses rates scaled by
    ``high_noise_scale``. With ``calibrate`` the rates are first rescaled on a
    pilot of the leading sentences so the emitted mean WER and mean PER hit
    their targets.
    """
    classes = classes or default_confusion_classes()
    items = [(normalize_text(t), lab) for t, lab in map(_split_item, clean_sentences)]
    if not items:
        raise ValueError("build_corpus needs at least one sentence")
    counts = Counter(w for t, _ in items for w in t.split())
    pool = InsertionPool.from_counts(counts) if counts else None

    stats = CorpusStats()
    if calibrate:
        pilot = [t for t, _ in islice(items, pilot_size) if t]
        stats.word_scale = calibrate_word_rates(pilot, cfg, lexicon, pool)
        stats.phoneme_scale = calibrate_phoneme_rates([g2p(t, lexicon) for t in pilot], cfg, classes)
        cfg = cfg.scaled(word=stats.word_scale, phoneme=stats.phoneme_scale)
        log.info("calibrated word scale %.4f, phoneme scale %.4f", stats.word_scale, stats.phoneme_scale)

    records: list[CorpusRecord] = []
    wers, pers = [], []
    for index, (text, label) in enumerate(items):
        stats.inputs += 1
        if not text:
            stats.rejected_empty += 1
            continue
        rec, per = forge_record(text, index, cfg, lexicon, pool, classes, label)
        if rec.wer < cfg.wer_floor:
            stats.rejected_low += 1
            continue
        if rec.wer > cfg.wer_ceiling:
            stats.rejected_high += 1
            continue
        stats.high_noise += uses_high_noise(cfg, index)
        stats.histogram[bucket_of(rec.wer)] += 1
        records.append(rec)
        wers.append(rec.wer)
        pers.append(per)
    stats.emitted = len(records)
    stats.mean_wer = float(np.mean(wers)) if wers else 0.0
    stats.mean_per = float(np.mean(pers)) if pers else 0.0
    stats.config = cfg
    return records, stats


def write_corpus(path: str | Path, records: Iterable[CorpusRecord]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), ensure_ascii=False) + "\n")
            n += 1
    return n


def iter_corpus(path: str | Path) -> Iterator[CorpusRecord]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield CorpusRecord.from_json(json.loads(line))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc


def read_corpus(path: str | Path) -> list[CorpusRecord]:
    return list(iter_corpus(path))


__all__ = [
    "PAUSE",
    "CorpusRecord",
    "CorpusStats",
    "WER_BUCKETS",
    "bucket_of",
    "build_corpus",
    "calibrate_phoneme_rates",
    "calibrate_word_rates",
    "derive_seed",
    "forge_record",
    "iter_corpus",
    "normalize_text",
    "read_corpus",
    "record_config",
    "write_corpus",
]
