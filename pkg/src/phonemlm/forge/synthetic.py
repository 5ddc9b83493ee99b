"""Synthetic clean-text sources for desk-scale experiments."""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .lexicon import Lexicon

_ALPHA = re.compile(r"^[a-z]+$")


def _plain_words(lexicon: Lexicon, start: int, stop: int, min_phones: int = 1) -> list[str]:
    words = list(lexicon.entries)[start:stop]
    return [w for w in words if _ALPHA.match(w) and len(lexicon.entries[w]) >= min_phones]


def random_sentences(
    n: int,
    lexicon: Lexicon,
    seed: int = 0,
    min_len: int = 10,
    max_len: int = 20,
    vocab_size: int = 5000,
) -> list[str]:
    """Zipf-weighted bags of frequent lexicon words."""
    rng = np.random.default_rng(seed)
    vocab = _plain_words(lexicon, 0, vocab_size)
    weights = 1.0 / np.arange(1, len(vocab) + 1)
    weights /= weights.sum()
    lengths = rng.integers(min_len, max_len + 1, size=n)
    return [" ".join(rng.choice(vocab, size=k, p=weights)) for k in lengths]


@dataclass
class KeywordTask:
    """Sentence classification where the label is the class of one keyword.

    Every sentence holds filler words shared by all classes plus exactly one
    keyword; the keyword alone determines the label.
    """

    keywords: list[list[str]]
    fillers: list[str]
    min_len: int = 8
    max_len: int = 12

    @classmethod
    def from_lexicon(
        cls,
        lexicon: Lexicon,
        num_classes: int = 4,
        keywords_per_class: int = 10,
        num_fillers: int = 150,
        seed: int = 0,
    ) -> "KeywordTask":
        rng = np.random.default_rng(seed)
        fillers = _plain_words(lexicon, 50, 50 + 4 * num_fillers, min_phones=2)
        fillers = [str(w) for w in rng.choice(fillers, size=num_fillers, replace=False)]
        pool = [w for w in _plain_words(lexicon, 1000, 6000, min_phones=4) if w not in fillers]
        picked = [str(w) for w in rng.choice(pool, size=num_classes * keywords_per_class, replace=False)]
        keywords = [picked[i::num_classes] for i in range(num_classes)]
        return cls(keywords=keywords, fillers=fillers)

    @property
    def num_classes(self) -> int:
        return len(self.keywords)

    def label_of(self, text: str) -> int:
        found = {c for c, kws in enumerate(self.keywords) for w in text.split() if w in kws}
        if len(found) != 1:
            raise ValueError(f"no unique keyword class in {text!r}")
        return found.pop()

    def sample(self, n: int, seed: int = 0) -> list[tuple[str, int]]:
        rng = np.random.default_rng(seed)
        out = []
        for _ in range(n):
            label = int(rng.integers(self.num_classes))
            kw = self.keywords[label][rng.integers(len(self.keywords[label]))]
            k = int(rng.integers(self.min_len, self.max_len + 1))
            words = [str(w) for w in rng.choice(self.fillers, size=k - 1)]
            words.insert(int(rng.integers(k)), kw)
            out.append((" ".join(words), label))
        return out
