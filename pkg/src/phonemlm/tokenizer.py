"""Byte-level word BPE, phoneme BPE, and the type-tagged joint vocabulary.

Word mode follows the RoBERTa convention: text gets a leading space and each
pre-token carries its preceding space byte, which acts as the word-boundary
prefix. Phoneme mode runs over whole phoneme sequences, so merges may span
the pause mark.
"""
from __future__ import annotations

import heapq
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .forge.lexicon import ARPABET, PAUSE

WORD, PHONEME = "word", "phoneme"
SPECIALS = ("BOS", "SEP", "MASK", "PAD", "UNK")
BOS_ID, SEP_ID, MASK_ID, PAD_ID, UNK_ID = range(len(SPECIALS))
NUM_SPECIALS = len(SPECIALS)
PHONEME_VOCAB_LIMIT = 600
PHONEME_BASE = tuple(ARPABET) + (PAUSE,)
DEFAULT_WORD_MERGES = 8000

TYPE_WORD, TYPE_PHONEME, TYPE_SPECIAL = 0, 1, 2

_PRETOKEN = re.compile(r" ?[^\W\d_]+| ?\d+| ?(?:[^\s\w]|_)+|\s+(?!\S)|\s+")


class VocabularyError(ValueError):
    pass


@lru_cache(maxsize=1)
def bytes_to_unicode() -> dict[int, str]:
    """Reversible byte → printable character map (the GPT-2 table)."""
    bs = list(range(ord("!"), ord("~") + 1)) + list(range(ord("¡"), ord("¬") + 1)) + list(range(ord("®"), ord("ÿ") + 1))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return {b: chr(c) for b, c in zip(bs, cs)}


@lru_cache(maxsize=1)
def unicode_to_bytes() -> dict[str, int]:
    return {c: b for b, c in bytes_to_unicode().items()}


def pretokenize(text: str) -> list[str]:
    if not text:
        return []
    return _PRETOKEN.findall(" " + text)


def _word_symbols(text: str) -> list[tuple[str, ...]]:
    table = bytes_to_unicode()
    return [tuple(table[b] for b in chunk.encode("utf-8")) for chunk in pretokenize(text)]


def _phoneme_symbols(seq: str) -> list[str]:
    return seq.split()


@dataclass
class BpeModel:
    """Trained BPE: base alphabet then merges, ids contiguous from 0.

    Token strings: word mode uses the printable byte map; phoneme mode joins
    base symbols with single spaces.
    """

    mode: str
    base_alphabet: list[str]
    merges: list[tuple[str, str]]
    token_to_id: dict[str, int] = field(init=False)
    id_to_token: list[str] = field(init=False)

    def __post_init__(self):
        if self.mode not in (WORD, PHONEME):
            raise VocabularyError(f"unknown BPE mode {self.mode!r}")
        self.id_to_token = list(self.base_alphabet) + [self.join(a, b) for a, b in self.merges]
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise VocabularyError("duplicate tokens in BPE model")
        self.ranks = {pair: i for i, pair in enumerate(self.merges)}
        self._base = frozenset(self.base_alphabet)
        self._cache: dict[tuple[str, ...], tuple[int, ...]] = {}

    def __len__(self):
        return len(self.id_to_token)

    def join(self, left: str, right: str) -> str:
        return left + right if self.mode == WORD else f"{left} {right}"

    def _bpe(self, symbols: tuple[str, ...]) -> tuple[int, ...]:
        cached = self._cache.get(symbols)
        if cached is not None:
            return cached
        parts = list(symbols)
        ranks = self.ranks
        while len(parts) > 1:
            best, best_rank = None, None
            for pair in zip(parts, parts[1:]):
                r = ranks.get(pair)
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = pair, r
            if best is None:
                break
            parts = _merge_pair(parts, best, self.join(*best))
        ids = tuple(self.token_to_id[p] for p in parts)
        if len(self._cache) < 200_000:
            self._cache[symbols] = ids
        return ids

    def encode(self, text: str) -> list[int]:
        """Local ids (0-based within this model); unknown base symbols → -1."""
        out: list[int] = []
        if self.mode == WORD:
            for chunk in _word_symbols(text):
                out.extend(self._bpe(chunk))
            return out
        run: list[str] = []
        for sym in _phoneme_symbols(text):
            if sym in self._base:
                run.append(sym)
                continue
            if run:
                out.extend(self._bpe(tuple(run)))
                run = []
            out.append(-1)
        if run:
            out.extend(self._bpe(tuple(run)))
        return out

    def token_bytes(self, local_id: int) -> bytes:
        back = unicode_to_bytes()
        return bytes(back[c] for c in self.id_to_token[local_id])


def _merge_pair(parts: list[str], pair: tuple[str, str], joined: str) -> list[str]:
    out = []
    i, n = 0, len(parts)
    a, b = pair
    while i < n:
        if i < n - 1 and parts[i] == a and parts[i + 1] == b:
            out.append(joined)
            i += 2
        else:
            out.append(parts[i])
            i += 1
    return out


def _pairs(parts: Sequence[str]) -> Counter:
    return Counter(zip(parts, parts[1:]))


def train_bpe(
    corpus: Iterable[str],
    merge_budget: int | None = None,
    mode: str = WORD,
    min_frequency: int = 2,
) -> BpeModel:
    """Greedy BPE: repeatedly merge the most frequent adjacent pair.

    Ties go to the lexicographically smallest pair of token strings. Training
    stops early when no pair reaches ``min_frequency``.

    >>> m = train_bpe(["aaab aaab"], 1)
    >>> m.merges
    [('a', 'a')]
    """
    if mode not in (WORD, PHONEME):
        raise VocabularyError(f"unknown BPE mode {mode!r}")
    if mode == WORD:
        base = [bytes_to_unicode()[b] for b in range(256)]
        budget = DEFAULT_WORD_MERGES if merge_budget is None else merge_budget
    else:
        base = list(PHONEME_BASE)
        budget = PHONEME_VOCAB_LIMIT - len(base) if merge_budget is None else merge_budget
        if len(base) + budget > PHONEME_VOCAB_LIMIT:
            raise VocabularyError(f"phoneme vocabulary would exceed {PHONEME_VOCAB_LIMIT} units")
    if budget < 0:
        raise VocabularyError("merge_budget must be >= 0")

    counts: Counter = Counter()
    base_set = set(base)
    seen_any = False
    for line in corpus:
        seen_any = True
        if mode == WORD:
            counts.update(_word_symbols(line))
        else:
            run: list[str] = []
            for sym in _phoneme_symbols(line):
                if sym in base_set:
                    run.append(sym)
                elif run:
                    counts[tuple(run)] += 1
                    run = []
            if run:
                counts[tuple(run)] += 1
    if not seen_any or not counts:
        raise VocabularyError("cannot train BPE on an empty corpus")

    model = BpeModel(mode, base, [])
    join = model.join
    words = [list(w) for w in counts]
    freqs = list(counts.values())
    pair_counts: Counter = Counter()
    where: dict[tuple[str, str], set[int]] = {}
    for idx, (w, f) in enumerate(zip(words, freqs)):
        for pair, c in _pairs(w).items():
            pair_counts[pair] += c * f
            where.setdefault(pair, set()).add(idx)

    heap = [(-c, pair) for pair, c in pair_counts.items()]
    heapq.heapify(heap)
    merges: list[tuple[str, str]] = []
    while len(merges) < budget and heap:
        neg, pair = heapq.heappop(heap)
        current = pair_counts.get(pair, 0)
        if current != -neg:
            # stale entry; a fresh one was pushed when the count changed
            continue
        if current < min_frequency:
            break
        merges.append(pair)
        joined = join(*pair)
        touched: set[tuple[str, str]] = set()
        for idx in where.pop(pair, ()):
            w, f = words[idx], freqs[idx]
            before = _pairs(w)
            if pair not in before:
                continue
            after_w = _merge_pair(w, pair, joined)
            after = _pairs(after_w)
            words[idx] = after_w
            for p, c in before.items():
                d = after.get(p, 0) - c
                if d:
                    pair_counts[p] += d * f
                    touched.add(p)
            for p, c in after.items():
                if p not in before:
                    pair_counts[p] += c * f
                    where.setdefault(p, set()).add(idx)
                    touched.add(p)
        pair_counts.pop(pair, None)
        for p in touched:
            c = pair_counts.get(p, 0)
            if c > 0:
                heapq.heappush(heap, (-c, p))
            else:
                pair_counts.pop(p, None)
    return BpeModel(mode, base, merges)


@dataclass
class JointVocabulary:
    """Specials, then word-BPE tokens, then phoneme-BPE tokens, in one id space."""

    word_model: BpeModel
    phoneme_model: BpeModel
    specials: tuple[str, ...] = SPECIALS

    def __post_init__(self):
        if self.word_model.mode != WORD or self.phoneme_model.mode != PHONEME:
            raise VocabularyError("joint vocabulary needs a word model and a phoneme model")
        if len(self.phoneme_model) > PHONEME_VOCAB_LIMIT:
            raise VocabularyError(
                f"phoneme vocabulary has {len(self.phoneme_model)} units (limit {PHONEME_VOCAB_LIMIT})"
            )
        self.word_offset = NUM_SPECIALS
        self.phoneme_offset = NUM_SPECIALS + len(self.word_model)
        self.total_size = self.phoneme_offset + len(self.phoneme_model)
        types = np.full(self.total_size, TYPE_SPECIAL, dtype=np.int8)
        types[self.word_offset:self.phoneme_offset] = TYPE_WORD
        types[self.phoneme_offset:] = TYPE_PHONEME
        self.type_array = types

    bos_id, sep_id, mask_id, pad_id, unk_id = BOS_ID, SEP_ID, MASK_ID, PAD_ID, UNK_ID

    @property
    def word_range(self) -> tuple[int, int]:
        return self.word_offset, self.phoneme_offset

    @property
    def phoneme_range(self) -> tuple[int, int]:
        return self.phoneme_offset, self.total_size

    def type_of(self, token_id: int) -> str:
        self._check(token_id)
        return (WORD, PHONEME, "special")[self.type_array[token_id]]

    def _check(self, token_id: int):
        if not 0 <= token_id < self.total_size:
            raise VocabularyError(f"id {token_id} outside vocabulary of size {self.total_size}")

    def encode(self, text: str, mode: str = WORD) -> list[int]:
        if mode == WORD:
            return [i + self.word_offset for i in self.word_model.encode(text)]
        if mode == PHONEME:
            return [UNK_ID if i < 0 else i + self.phoneme_offset for i in self.phoneme_model.encode(text)]
        raise VocabularyError(f"unknown mode {mode!r}")

    def decode(self, ids: Sequence[int]) -> str:
        """Text for ``ids``; specials render as ``[NAME]``."""
        segments: list[tuple[int, str]] = []
        buf = bytearray()
        phon: list[str] = []

        def flush():
            if buf:
                segments.append((TYPE_WORD, buf.decode("utf-8", errors="replace")))
                buf.clear()
            if phon:
                segments.append((TYPE_PHONEME, " ".join(phon)))
                phon.clear()

        for raw in ids:
            i = int(raw)
            self._check(i)
            kind = self.type_array[i]
            if kind == TYPE_WORD:
                if phon:
                    flush()
                buf.extend(self.word_model.token_bytes(i - self.word_offset))
            elif kind == TYPE_PHONEME:
                if buf:
                    flush()
                phon.append(self.phoneme_model.id_to_token[i - self.phoneme_offset])
            else:
                flush()
                segments.append((TYPE_SPECIAL, f"[{self.specials[i]}]"))
        flush()
        if not segments:
            return ""
        kind0, text0 = segments[0]
        if kind0 == TYPE_WORD and text0.startswith(" "):
            segments[0] = (kind0, text0[1:])
        out = segments[0][1]
        for (pk, _), (k, text) in zip(segments, segments[1:]):
            out += (" " if TYPE_PHONEME in (pk, k) else "") + text
        return out

    def to_json(self) -> dict:
        return {
            "specials": list(self.specials),
            "word_tokens": self.word_model.id_to_token,
            "phoneme_tokens": self.phoneme_model.id_to_token,
            "word_merges": [list(m) for m in self.word_model.merges],
            "phoneme_merges": [list(m) for m in self.phoneme_model.merges],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "JointVocabulary":
        if tuple(obj["specials"]) != SPECIALS:
            raise VocabularyError(f"unexpected specials {obj['specials']}")
        models = []
        for mode in (WORD, PHONEME):
            merges = [tuple(m) for m in obj[f"{mode}_merges"]]
            tokens = obj[f"{mode}_tokens"]
            base = tokens[: len(tokens) - len(merges)]
            model = BpeModel(mode, base, merges)
            if model.id_to_token != tokens:
                raise VocabularyError(f"{mode} tokens disagree with their merges")
            models.append(model)
        return cls(*models)

    def save(self, path: str | Path):
        Path(path).write_text(json.dumps(self.to_json(), ensure_ascii=False), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "JointVocabulary":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def build_joint_vocab(word_model: BpeModel, phoneme_model: BpeModel) -> JointVocabulary:
    return JointVocabulary(word_model, phoneme_model)
