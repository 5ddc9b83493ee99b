"""CMUdict-format pronunciation lexicon and lexicon-lookup G2P."""
from __future__ import annotations

import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

# Closed 39-symbol ARPABET inventory (stress stripped).
ARPABET = (
    "AA", "AE", "AH", "AO", "AW", "AY", "B", "CH", "D", "DH", "EH", "ER", "EY",
    "F", "G", "HH", "IH", "IY", "JH", "K", "L", "M", "N", "NG", "OW", "OY", "P",
    "R", "S", "SH", "T", "TH", "UH", "UW", "V", "W", "Y", "Z", "ZH",
)
ARPABET_SET = frozenset(ARPABET)
PAUSE = "|"

LETTER_FALLBACK = {
    "a": "AE", "b": "B", "c": "K", "d": "D", "e": "EH", "f": "F", "g": "G",
    "h": "HH", "i": "IH", "j": "JH", "k": "K", "l": "L", "m": "M", "n": "N",
    "o": "AA", "p": "P", "q": "K", "r": "R", "s": "S", "t": "T", "u": "AH",
    "v": "V", "w": "W", "x": "K", "y": "Y", "z": "Z",
    "0": "Z", "1": "W", "2": "T", "3": "TH", "4": "F", "5": "F", "6": "S",
    "7": "S", "8": "EY", "9": "N",
}

_STRESS = re.compile(r"\d+$")
_ALT_SUFFIX = re.compile(r"\(\d+\)$")
# whitespace and punctuation split words; apostrophes stay inside words
_WORD_SPLIT = re.compile(r"[^\w']+|_")


class LexiconError(ValueError):
    pass


def strip_stress(symbol: str) -> str:
    return _STRESS.sub("", symbol)


def tokenize_words(text: str) -> list[str]:
    return [w for w in _WORD_SPLIT.split(text.lower()) if w]


@dataclass
class Lexicon:
    """Word → phoneme lookup with an inverse (pronunciation → words) index.

    ``entries`` keeps insertion order; the shipped file is sorted by corpus
    frequency, so the first entries are the most common words.
    """

    entries: dict[str, tuple[str, ...]]
    letter_fallback: dict[str, str] = field(default_factory=lambda: dict(LETTER_FALLBACK))
    unknown_chars: Counter = field(default_factory=Counter)

    def __post_init__(self):
        inverse: dict[tuple[str, ...], list[str]] = defaultdict(list)
        for word, pron in self.entries.items():
            bad = [p for p in pron if p not in ARPABET_SET]
            if bad:
                raise LexiconError(f"{word!r}: non-ARPABET symbols {bad}")
            inverse[pron].append(word)
        self.inverse = dict(inverse)
        missing = set("abcdefghijklmnopqrstuvwxyz0123456789") - set(self.letter_fallback)
        if missing:
            raise LexiconError(f"letter_fallback not total; missing {sorted(missing)}")
        self._neighbors = None

    def __len__(self):
        return len(self.entries)

    def __contains__(self, word):
        return word in self.entries

    @property
    def words(self) -> list[str]:
        return list(self.entries)

    def pronounce(self, word: str) -> list[str]:
        """Pronunciation of one lowercased word, letter-by-letter when OOV."""
        pron = self.entries.get(word)
        if pron is not None:
            return list(pron)
        out = []
        for ch in word:
            sym = self.letter_fallback.get(ch)
            if sym is None:
                self.unknown_chars[ch] += 1
            else:
                out.append(sym)
        return out

    def neighbor_index(self):
        # built lazily: only the word noise channel needs it
        if self._neighbors is None:
            from .channels import NeighborIndex

            self._neighbors = NeighborIndex(self)
        return self._neighbors


def parse_lexicon(lines, max_entries: int | None = None) -> dict[str, tuple[str, ...]]:
    entries: dict[str, tuple[str, ...]] = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith(";;;"):
            continue
        parts = line.split()
        if len(parts) < 2:
            raise LexiconError(f"line {lineno}: expected 'WORD  PH1 PH2 ...'")
        word = _ALT_SUFFIX.sub("", parts[0]).lower()
        if word in entries:
            # alternate pronunciations: first one wins
            continue
        entries[word] = tuple(strip_stress(p) for p in parts[1:])
        if max_entries is not None and len(entries) >= max_entries:
            break
    return entries


def load_lexicon(path: str | Path | None = None, max_entries: int | None = None) -> Lexicon:
    """Load a CMUdict-format file; ``None`` loads the shipped 20k-word subset."""
    if path is None:
        text = resources.files("phonemlm.data").joinpath("lexicon.dict").read_text("utf-8")
        return Lexicon(parse_lexicon(text.splitlines(), max_entries))
    with open(path, encoding="utf-8") as fh:
        return Lexicon(parse_lexicon(fh, max_entries))


def g2p(text: str, lexicon: Lexicon) -> list[str]:
    """Phoneme tokens for ``text``, one pause mark between words.

    >>> g2p("cat", load_lexicon())
    ['K', 'AE', 'T']
    """
    out: list[str] = []
    for word in tokenize_words(text):
        pron = lexicon.pronounce(word)
        if not pron:
            continue
        if out:
            out.append(PAUSE)
        out.extend(pron)
    return out
