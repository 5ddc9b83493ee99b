"""Joint (word ∥ phoneme) sequence layout, MLM masking, and collation."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tokenizer import TYPE_PHONEME, TYPE_SPECIAL, TYPE_WORD, JointVocabulary

IGNORE = -100
MASK_FRACTION = 0.8
KEEP_FRACTION = 0.1


@dataclass
class JointSequence:
    """One laid-out input row.

    Joint layout ``BOS w.. SEP p.. SEP``; word-only ``BOS w.. SEP``;
    phoneme-only ``BOS p.. SEP``. Phoneme positions always restart at 0.
    Spans are half-open index ranges; an absent block has an empty span.
    """

    token_ids: np.ndarray
    position_ids: np.ndarray
    type_ids: np.ndarray
    word_span: tuple[int, int]
    phoneme_span: tuple[int, int]

    def __len__(self):
        return len(self.token_ids)


@dataclass
class MaskedRow:
    masked_ids: np.ndarray
    token_ids: np.ndarray
    position_ids: np.ndarray
    type_ids: np.ndarray
    targets: np.ndarray
    word_span: tuple[int, int]
    phoneme_span: tuple[int, int]
    # 0 = [MASK], 1 = kept, 2 = random same-type token, -1 = not selected
    action: np.ndarray | None = None

    def __len__(self):
        return len(self.masked_ids)

    @property
    def mask_positions_word(self) -> np.ndarray:
        lo, hi = self.word_span
        return lo + np.flatnonzero(self.targets[lo:hi] != IGNORE)

    @property
    def mask_positions_phoneme(self) -> np.ndarray:
        lo, hi = self.phoneme_span
        return lo + np.flatnonzero(self.targets[lo:hi] != IGNORE)

    def to_json(self) -> dict:
        return {
            "masked_ids": self.masked_ids.tolist(),
            "token_ids": self.token_ids.tolist(),
            "targets": self.targets.tolist(),
            "position_ids": self.position_ids.tolist(),
            "type_ids": self.type_ids.tolist(),
        }


@dataclass
class MaskedJointBatch:
    masked_ids: np.ndarray
    attention_mask: np.ndarray
    position_ids: np.ndarray
    type_ids: np.ndarray
    targets: np.ndarray
    mask_positions_word: np.ndarray
    mask_positions_phoneme: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.masked_ids.shape

    @property
    def num_masked(self) -> int:
        return int((self.targets != IGNORE).sum())


def _split_budget(n_word: int, n_phon: int, budget: int) -> tuple[int, int]:
    """Proportional truncation; the remainder goes to the longer block (word on ties)."""
    if n_word + n_phon <= budget:
        return n_word, n_phon
    total = n_word + n_phon
    keep_w = budget * n_word // total
    keep_p = budget * n_phon // total
    while keep_w + keep_p < budget:
        if n_word - keep_w >= n_phon - keep_p and keep_w < n_word:
            keep_w += 1
        else:
            keep_p += 1
    return keep_w, keep_p


def assemble_sequence(
    word_ids: Sequence[int],
    phoneme_ids: Sequence[int],
    vocab: JointVocabulary,
    max_len: int,
) -> JointSequence:
    """Joint layout, or word-only layout when ``phoneme_ids`` is empty."""
    if max_len < 4:
        raise ValueError(f"max_len={max_len} cannot hold the special tokens")
    word_ids, phoneme_ids = list(word_ids), list(phoneme_ids)
    if not phoneme_ids:
        nw = min(len(word_ids), max_len - 2)
        toks = [vocab.bos_id] + word_ids[:nw] + [vocab.sep_id]
        return JointSequence(
            token_ids=np.array(toks, dtype=np.int64),
            position_ids=np.arange(len(toks), dtype=np.int64),
            type_ids=np.zeros(len(toks), dtype=np.int64),
            word_span=(1, 1 + nw),
            phoneme_span=(len(toks), len(toks)),
        )
    nw, np_ = _split_budget(len(word_ids), len(phoneme_ids), max_len - 3)
    toks = [vocab.bos_id] + word_ids[:nw] + [vocab.sep_id] + phoneme_ids[:np_] + [vocab.sep_id]
    word_block = nw + 2
    positions = np.concatenate([np.arange(word_block), np.arange(np_ + 1)])
    types = np.concatenate([np.zeros(word_block), np.ones(np_ + 1)])
    return JointSequence(
        token_ids=np.array(toks, dtype=np.int64),
        position_ids=positions.astype(np.int64),
        type_ids=types.astype(np.int64),
        word_span=(1, 1 + nw),
        phoneme_span=(word_block, word_block + np_),
    )


def assemble_phoneme_only(phoneme_ids: Sequence[int], vocab: JointVocabulary, max_len: int) -> JointSequence:
    """``BOS p.. SEP`` with phoneme type ids; BOS shares position 0 with the first phoneme."""
    if max_len < 3:
        raise ValueError(f"max_len={max_len} cannot hold the special tokens")
    ph = list(phoneme_ids)[: max_len - 2]
    toks = [vocab.bos_id] + ph + [vocab.sep_id]
    positions = np.concatenate([[0], np.arange(len(ph) + 1)])
    return JointSequence(
        token_ids=np.array(toks, dtype=np.int64),
        position_ids=positions.astype(np.int64),
        type_ids=np.ones(len(toks), dtype=np.int64),
        word_span=(1, 1),
        phoneme_span=(1, 1 + len(ph)),
    )


def apply_masking(
    seq: JointSequence,
    vocab: JointVocabulary,
    mask_prob: float = 0.15,
    seed=None,
    rng: np.random.Generator | None = None,
) -> MaskedRow:
    """Select each maskable position with probability ``mask_prob``.

    Selected positions become [MASK] (80%), stay unchanged (10%), or get a
    uniformly drawn id of the same token type (10%). Specials and PAD are
    never selected. Consumes a fixed number of draws per position.
    """
    if not 0.0 <= mask_prob <= 1.0:
        raise ValueError("mask_prob must be in [0, 1]")
    rng = rng if rng is not None else np.random.default_rng(seed)
    ids = seq.token_ids
    n = len(ids)
    select_u, action_u, pick_u = rng.random((3, n))
    types = vocab.type_array[ids]
    maskable = types != TYPE_SPECIAL
    selected = maskable & (select_u < mask_prob)

    masked = ids.copy()
    targets = np.full(n, IGNORE, dtype=np.int64)
    targets[selected] = ids[selected]
    action = np.full(n, -1, dtype=np.int8)
    to_mask = selected & (action_u < MASK_FRACTION)
    to_keep = selected & (action_u >= MASK_FRACTION) & (action_u < MASK_FRACTION + KEEP_FRACTION)
    to_rand = selected & (action_u >= MASK_FRACTION + KEEP_FRACTION)
    action[to_mask], action[to_keep], action[to_rand] = 0, 1, 2
    masked[to_mask] = vocab.mask_id
    for kind, (lo, hi) in ((TYPE_WORD, vocab.word_range), (TYPE_PHONEME, vocab.phoneme_range)):
        sel = to_rand & (types == kind)
        masked[sel] = lo + np.minimum((pick_u[sel] * (hi - lo)).astype(np.int64), hi - lo - 1)
    return MaskedRow(
        masked_ids=masked,
        token_ids=ids.copy(),
        position_ids=seq.position_ids.copy(),
        type_ids=seq.type_ids.copy(),
        targets=targets,
        word_span=seq.word_span,
        phoneme_span=seq.phoneme_span,
        action=action,
    )


def _view(row: MaskedRow, span, vocab: JointVocabulary, phoneme: bool) -> MaskedRow:
    lo, hi = span
    n = hi - lo
    ids = lambda a: np.concatenate([[vocab.bos_id], a[lo:hi], [vocab.sep_id]]).astype(np.int64)
    if phoneme:
        positions = np.concatenate([[0], np.arange(n + 1)])
        types = np.ones(n + 2)
    else:
        positions = np.arange(n + 2)
        types = np.zeros(n + 2)
    targets = np.concatenate([[IGNORE], row.targets[lo:hi], [IGNORE]]).astype(np.int64)
    return MaskedRow(
        masked_ids=ids(row.masked_ids),
        token_ids=ids(row.token_ids),
        position_ids=positions.astype(np.int64),
        type_ids=types.astype(np.int64),
        targets=targets,
        word_span=(1, 1 + n) if not phoneme else (1, 1),
        phoneme_span=(1, 1 + n) if phoneme else (n + 2, n + 2),
        action=None if row.action is None else np.concatenate([[-1], row.action[lo:hi], [-1]]).astype(np.int8),
    )


def word_view(row: MaskedRow, vocab: JointVocabulary) -> MaskedRow:
    """``BOS Â SEP`` carrying the same mask realisation as ``row``."""
    return _view(row, row.word_span, vocab, phoneme=False)


def phoneme_view(row: MaskedRow, vocab: JointVocabulary) -> MaskedRow:
    """``BOS P̂ SEP`` carrying the same mask realisation as ``row``."""
    return _view(row, row.phoneme_span, vocab, phoneme=True)


def unmasked_row(seq: JointSequence) -> MaskedRow:
    n = len(seq)
    return MaskedRow(
        masked_ids=seq.token_ids.copy(),
        token_ids=seq.token_ids.copy(),
        position_ids=seq.position_ids.copy(),
        type_ids=seq.type_ids.copy(),
        targets=np.full(n, IGNORE, dtype=np.int64),
        word_span=seq.word_span,
        phoneme_span=seq.phoneme_span,
    )


def collate_batch(rows: Sequence[MaskedRow], pad_id: int, pad_to: int | None = None) -> MaskedJointBatch:
    """Right-pad rows to a common length; PAD gets attention 0 and position/type 0."""
    if not rows:
        raise ValueError("cannot collate an empty batch")
    width = max(len(r) for r in rows)
    if pad_to is not None:
        if pad_to < width:
            raise ValueError(f"pad_to={pad_to} shorter than longest row ({width})")
        width = pad_to
    b = len(rows)
    masked = np.full((b, width), pad_id, dtype=np.int64)
    attention = np.zeros((b, width), dtype=np.int64)
    positions = np.zeros((b, width), dtype=np.int64)
    types = np.zeros((b, width), dtype=np.int64)
    targets = np.full((b, width), IGNORE, dtype=np.int64)
    word_pos, phon_pos = [], []
    for i, r in enumerate(rows):
        n = len(r)
        masked[i, :n] = r.masked_ids
        attention[i, :n] = 1
        positions[i, :n] = r.position_ids
        types[i, :n] = r.type_ids
        targets[i, :n] = r.targets
        word_pos.extend((i, j) for j in r.mask_positions_word)
        phon_pos.extend((i, j) for j in r.mask_positions_phoneme)
    return MaskedJointBatch(
        masked_ids=masked,
        attention_mask=attention,
        position_ids=positions,
        type_ids=types,
        targets=targets,
        mask_positions_word=np.array(word_pos, dtype=np.int64).reshape(-1, 2),
        mask_positions_phoneme=np.array(phon_pos, dtype=np.int64).reshape(-1, 2),
    )


def dump_rows(path, rows: Sequence[MaskedRow]):
    """Debug dump: one JSON object per masked row."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r.to_json()) + "\n")
