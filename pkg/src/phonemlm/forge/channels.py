"""Stochastic word-level and phoneme-level error channels.

Both channels draw exactly two uniforms per input position, so runs with the
same seed but different rates share random numbers (this keeps rate
calibration by bisection well behaved).
"""
from __future__ import annotations

import bisect
from collections import defaultdict
from dataclasses import dataclass, fields, replace
from importlib import resources
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np

from .lexicon import ARPABET, ARPABET_SET, PAUSE, Lexicon
from .wer import edit_distance

WORD_STREAM = 0
PHONEME_STREAM = 1
_SYM = {p: chr(0x41 + i) for i, p in enumerate(ARPABET)}


@dataclass(frozen=True)
class NoiseConfig:
    word_sub_rate: float = 0.15
    word_del_rate: float = 0.06
    word_ins_rate: float = 0.04
    phoneme_sub_rate: float = 0.055
    phoneme_del_rate: float = 0.025
    phoneme_ins_rate: float = 0.02
    target_mean_wer: float = 0.30
    target_mean_per: float = 0.10
    wer_floor: float = 0.05
    wer_ceiling: float = 0.40
    high_noise_share: float = 0.25
    high_noise_scale: float = 1.5
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            if f.name.endswith("_rate") or f.name in ("wer_floor", "wer_ceiling", "high_noise_share"):
                v = getattr(self, f.name)
                if not 0.0 <= v <= 1.0:
                    raise ValueError(f"{f.name}={v} outside [0, 1]")
        if self.word_sub_rate + self.word_del_rate + self.word_ins_rate > 1.0 + 1e-12:
            raise ValueError("word sub+del+ins rates exceed 1 per position")
        if self.phoneme_sub_rate + self.phoneme_del_rate + self.phoneme_ins_rate > 1.0 + 1e-12:
            raise ValueError("phoneme sub+del+ins rates exceed 1 per position")
        if not self.wer_floor < self.wer_ceiling:
            raise ValueError("wer_floor must be below wer_ceiling")
        if self.high_noise_scale < 1.0:
            raise ValueError("high_noise_scale must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def word_rates(self) -> tuple[float, float, float]:
        return self.word_sub_rate, self.word_del_rate, self.word_ins_rate

    @property
    def phoneme_rates(self) -> tuple[float, float, float]:
        return self.phoneme_sub_rate, self.phoneme_del_rate, self.phoneme_ins_rate

    def scaled(self, word: float = 1.0, phoneme: float = 1.0) -> "NoiseConfig":
        """Copy with rates multiplied, keeping each triple's sum <= 1."""
        w = _scale_triple(self.word_rates, word)
        p = _scale_triple(self.phoneme_rates, phoneme)
        return replace(
            self,
            word_sub_rate=w[0], word_del_rate=w[1], word_ins_rate=w[2],
            phoneme_sub_rate=p[0], phoneme_del_rate=p[1], phoneme_ins_rate=p[2],
        )

    def high_level(self) -> "NoiseConfig":
        return self.scaled(self.high_noise_scale, self.high_noise_scale)


def _scale_triple(rates, factor):
    scaled = [r * factor for r in rates]
    total = sum(scaled)
    if total > 1.0:
        scaled = [r / total for r in scaled]
    return tuple(scaled)


class NeighborIndex:
    """Exact nearest-pronunciation search, edit distance <= ``max_distance``.

    Deletion-neighbourhood index: two pronunciations within distance k share
    a variant reachable by at most k deletions from each side, so candidates
    come from dictionary hits and are then verified with a full DP.
    """

    def __init__(self, lexicon: Lexicon, max_distance: int = 2):
        self.max_distance = max_distance
        self.rank = {w: i for i, w in enumerate(lexicon.entries)}
        self.words_by_key: dict[str, list[str]] = {}
        self.deletes: dict[str, set[str]] = defaultdict(set)
        for pron, words in lexicon.inverse.items():
            key = self.encode(pron)
            self.words_by_key[key] = words
            for variant in self._variants(key):
                self.deletes[variant].add(key)
        self._cache: dict[tuple[str, str], list[str]] = {}

    @staticmethod
    def encode(pron: Sequence[str]) -> str:
        return "".join(_SYM[p] for p in pron)

    def _variants(self, key: str) -> set[str]:
        out = {key}
        n = len(key)
        for k in range(1, min(self.max_distance, n) + 1):
            for drop in combinations(range(n), k):
                out.add("".join(c for i, c in enumerate(key) if i not in drop))
        return out

    def nearest(self, word: str, pron: Sequence[str]) -> list[str]:
        """Distinct lexicon words at minimum distance from ``pron``, in lexicon order."""
        key = self.encode(pron)
        cached = self._cache.get((word, key))
        if cached is not None:
            return cached
        candidates: set[str] = set()
        for variant in self._variants(key):
            candidates |= self.deletes.get(variant, set())
        best = self.max_distance + 1
        found: list[str] = []
        for cand in candidates:
            d = edit_distance(key, cand)
            if d > best:
                continue
            words = [w for w in self.words_by_key[cand] if w != word]
            if not words:
                continue
            if d < best:
                best, found = d, []
            found.extend(words)
        found.sort(key=self.rank.__getitem__)
        self._cache[(word, key)] = found
        return found


class InsertionPool:
    """Weighted word sampler indexed by a uniform draw."""

    def __init__(self, words: Sequence[str], weights: Sequence[float] | None = None):
        if not words:
            raise ValueError("insertion pool is empty")
        self.words = list(words)
        w = np.ones(len(words)) if weights is None else np.asarray(weights, dtype=np.float64)
        cum = np.cumsum(w)
        self._cum = list(cum / cum[-1])

    def pick(self, u: float) -> str:
        return self.words[min(bisect.bisect_right(self._cum, u), len(self.words) - 1)]

    @classmethod
    def from_counts(cls, counts, top: int = 1000) -> "InsertionPool":
        common = counts.most_common(top)
        return cls([w for w, _ in common], [c for _, c in common])

    @classmethod
    def from_lexicon(cls, lexicon: Lexicon, top: int = 1000) -> "InsertionPool":
        return cls(list(lexicon.entries)[:top])


def word_noise_channel(
    clean_text: str,
    cfg: NoiseConfig,
    lexicon: Lexicon,
    insertion_pool: InsertionPool | None = None,
) -> str:
    """Simulated ASR transcript of ``clean_text``.

    Per word, mutually exclusive: substitution by a phonetically nearest
    distinct lexicon word, deletion, or insertion of a sampled word after it.
    Words with no neighbour within distance 2 pass through unchanged.
    """
    if not clean_text.strip():
        raise ValueError("clean_text is empty")
    pool = insertion_pool or _default_pool(lexicon)
    words = clean_text.split()
    draws = np.random.default_rng([cfg.seed, WORD_STREAM]).random((len(words), 2))
    return " ".join(apply_word_errors(words, draws, cfg.word_rates, lexicon, pool))


def apply_word_errors(words, draws, rates, lexicon: Lexicon, pool: InsertionPool) -> list[str]:
    """Word channel driven by explicit (n, 2) uniform draws."""
    index = lexicon.neighbor_index()
    sub, dele, ins = rates
    out = []
    for word, (u, v) in zip(words, draws):
        if u < sub:
            options = index.nearest(word, lexicon.pronounce(word))
            out.append(options[int(v * len(options))] if options else word)
        elif u < sub + dele:
            continue
        elif u < sub + dele + ins:
            out.append(word)
            out.append(pool.pick(v))
        else:
            out.append(word)
    return out


_POOLS: dict[int, InsertionPool] = {}


def _default_pool(lexicon: Lexicon) -> InsertionPool:
    pool = _POOLS.get(id(lexicon))
    if pool is None:
        pool = _POOLS[id(lexicon)] = InsertionPool.from_lexicon(lexicon)
    return pool


class ConfusionClasses:
    """Partition of the phoneme inventory into substitution classes."""

    def __init__(self, classes: Sequence[Sequence[str]]):
        self.classes = [tuple(c) for c in classes]
        self.class_of: dict[str, tuple[str, ...]] = {}
        for cls in self.classes:
            for p in cls:
                if p not in ARPABET_SET:
                    raise ValueError(f"unknown phoneme {p!r} in confusion table")
                if p in self.class_of:
                    raise ValueError(f"phoneme {p!r} listed in two classes")
                self.class_of[p] = cls
        missing = ARPABET_SET - set(self.class_of)
        if missing:
            raise ValueError(f"confusion table misses {sorted(missing)}")
        self.alternatives = {p: tuple(q for q in cls if q != p) for p, cls in self.class_of.items()}

    @classmethod
    def load(cls, path: str | Path | None = None) -> "ConfusionClasses":
        if path is None:
            text = resources.files("phonemlm.data").joinpath("confusion_classes.txt").read_text("utf-8")
        else:
            text = Path(path).read_text("utf-8")
        return cls([line.split() for line in text.splitlines() if line.strip()])


_DEFAULT_CLASSES: ConfusionClasses | None = None


def default_confusion_classes() -> ConfusionClasses:
    global _DEFAULT_CLASSES
    if _DEFAULT_CLASSES is None:
        _DEFAULT_CLASSES = ConfusionClasses.load()
    return _DEFAULT_CLASSES


def phoneme_noise_channel(
    clean_phonemes: Sequence[str],
    cfg: NoiseConfig,
    classes: ConfusionClasses | None = None,
) -> list[str]:
    """Independent phoneme-recogniser errors applied to clean-text phonemes.

    Substitutions stay inside the phoneme's confusion class; pause marks are
    never substituted but can be deleted or followed by an insertion.
    """
    classes = classes or default_confusion_classes()
    draws = np.random.default_rng([cfg.seed, PHONEME_STREAM]).random((len(clean_phonemes), 2))
    return apply_phoneme_errors(clean_phonemes, draws, cfg.phoneme_rates, classes)


def apply_phoneme_errors(tokens, draws, rates, classes: ConfusionClasses) -> list[str]:
    """Phoneme channel driven by explicit (n, 2) uniform draws."""
    sub, dele, ins = rates
    out: list[str] = []
    for tok, (u, v) in zip(tokens, draws):
        if u < sub:
            alts = classes.alternatives.get(tok, ())
            out.append(alts[int(v * len(alts))] if alts else tok)
        elif u < sub + dele:
            continue
        elif u < sub + dele + ins:
            out.append(tok)
            out.append(ARPABET[int(v * len(ARPABET))])
        else:
            out.append(tok)
    return out


def is_phoneme_token(tok: str) -> bool:
    return tok in ARPABET_SET or tok == PAUSE
