"""Word/phoneme error rates via Levenshtein alignment."""
from __future__ import annotations

from typing import Sequence


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Unit-cost Levenshtein distance between two token sequences.

    Bit-parallel evaluation of the standard DP (Myers 1999 / Hyyrö 2001):
    one column of vertical deltas is packed into an int, bit i for ref[i].
    """
    m = len(ref)
    if m == 0:
        return len(hyp)
    peq: dict = {}
    for i, tok in enumerate(ref):
        peq[tok] = peq.get(tok, 0) | (1 << i)
    mask = (1 << m) - 1
    top = 1 << (m - 1)
    pv, mv, score = mask, 0, m
    for tok in hyp:
        eq = peq.get(tok, 0)
        xv = eq | mv
        xh = (((eq & pv) + pv) ^ pv) | eq
        ph = mv | (~(xh | pv) & mask)
        mh = pv & xh
        if ph & top:
            score += 1
        elif mh & top:
            score -= 1
        ph = ((ph << 1) | 1) & mask
        mh = (mh << 1) & mask
        pv = mh | (~(xv | ph) & mask)
        mv = ph & xv
    return score


def error_rate(ref: Sequence, hyp: Sequence) -> float:
    if len(ref) == 0:
        raise ValueError("error rate undefined for an empty reference")
    return edit_distance(ref, hyp) / len(ref)


def compute_wer(ref: str, hyp: str) -> float:
    """(S + D + I) / N over whitespace-separated words.

    >>> compute_wer("book a flight to boston", "book flight to austin")
    0.4
    """
    return error_rate(ref.split(), hyp.split())


def compute_per(ref: Sequence[str], hyp: Sequence[str]) -> float:
    return error_rate(list(ref), list(hyp))
