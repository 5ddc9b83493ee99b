from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from phonemlm.forge import ARPABET, PAUSE
from phonemlm.tokenizer import (
    NUM_SPECIALS,
    PHONEME,
    PHONEME_BASE,
    TYPE_PHONEME,
    TYPE_SPECIAL,
    TYPE_WORD,
    UNK_ID,
    WORD,
    BpeModel,
    JointVocabulary,
    VocabularyError,
    build_joint_vocab,
    bytes_to_unicode,
    pretokenize,
    train_bpe,
)

from conftest import SENTENCES


def naive_bpe(sequences, budget, join, min_frequency=2):
    """Recount every pair from scratch each round; lexicographic tie-break."""
    seqs = [list(s) for s in sequences]
    merges = []
    for _ in range(budget):
        counts = Counter()
        for s in seqs:
            counts.update(zip(s, s[1:]))
        if not counts:
            break
        top = max(counts.values())
        if top < min_frequency:
            break
        pair = min(p for p, c in counts.items() if c == top)
        merges.append(pair)
        new = []
        for s in seqs:
            out, i = [], 0
            while i < len(s):
                if i + 1 < len(s) and (s[i], s[i + 1]) == pair:
                    out.append(join(*pair))
                    i += 2
                else:
                    out.append(s[i])
                    i += 1
            new.append(out)
        seqs = new
    return merges


class TestTrainBpe:
    def test_first_merge_is_most_frequent(self):
        model = train_bpe(["aaab aaab"], 1)
        assert model.merges == [("a", "a")]

    def test_zero_budget_is_base_alphabet(self):
        model = train_bpe(["hello world"], 0)
        assert model.id_to_token == [bytes_to_unicode()[b] for b in range(256)]
        ph = train_bpe(["K AE T | S AE T"], 0, PHONEME)
        assert ph.id_to_token == list(PHONEME_BASE)

    def test_empty_corpus(self):
        with pytest.raises(VocabularyError):
            train_bpe([], 10)

    def test_phoneme_budget_capped(self):
        with pytest.raises(VocabularyError):
            train_bpe(["K AE T"], 561, PHONEME)

    def test_merges_can_span_pauses(self):
        model = train_bpe(["AH | B AH | B AH | B"] * 3, 5, PHONEME)
        assert any(PAUSE in pair for pair in model.merges)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.lists(st.sampled_from(["AA", "B", "K", PAUSE]), min_size=1, max_size=12), min_size=1, max_size=8),
           st.integers(0, 12))
    def test_matches_naive_trainer_phoneme(self, lines, budget):
        corpus = [" ".join(line) for line in lines]
        model = train_bpe(corpus, budget, PHONEME)
        assert model.merges == naive_bpe(lines, budget, lambda a, b: f"{a} {b}")

    def test_matches_naive_trainer_word(self):
        rng = np.random.default_rng(3)
        letters = list("abcd")
        lines = [" ".join("".join(rng.choice(letters, size=rng.integers(1, 6))) for _ in range(rng.integers(1, 5)))
                 for _ in range(40)]
        table = bytes_to_unicode()
        chunks = [tuple(table[b] for b in c.encode()) for line in lines for c in pretokenize(line)]
        model = train_bpe(lines, 30)
        assert model.merges == naive_bpe(chunks, 30, lambda a, b: a + b)

    def test_deterministic(self, phoneme_lines):
        a = train_bpe(phoneme_lines, 40, PHONEME)
        b = train_bpe(phoneme_lines, 40, PHONEME)
        assert a.merges == b.merges


class TestEncode:
    def test_hand_applied_merge(self):
        model = BpeModel(PHONEME, ["a", "b"], [("a", "b")])
        assert model.encode("a a b") == [0, 2]

    def test_empty(self, vocab):
        assert vocab.encode("") == []
        assert vocab.encode("", PHONEME) == []
        assert vocab.decode([]) == ""

    def test_unknown_phoneme_is_unk(self, vocab):
        ids = vocab.encode("K XX T", PHONEME)
        assert UNK_ID in ids

    @settings(max_examples=100, deadline=None)
    @given(st.text(max_size=40))
    def test_word_round_trip_any_text(self, text):
        v = _shared_vocab()
        assert v.decode(v.encode(text)) == text

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.sampled_from(list(ARPABET) + [PAUSE]), max_size=30))
    def test_phoneme_round_trip(self, symbols):
        seq = " ".join(symbols)
        v = _shared_vocab()
        assert v.decode(v.encode(seq, PHONEME)) == seq

    def test_specials_render_bracketed(self, vocab):
        ids = [vocab.bos_id] + vocab.encode("the cat") + [vocab.sep_id]
        assert vocab.decode(ids) == "[BOS] the cat[SEP]"

    def test_out_of_range_decode(self, vocab):
        with pytest.raises(VocabularyError):
            vocab.decode([vocab.total_size])


_VOCAB = {}


def _shared_vocab():
    if "v" not in _VOCAB:
        from phonemlm.forge import g2p, load_lexicon

        lex = load_lexicon()
        ph = [" ".join(g2p(s, lex)) for s in SENTENCES]
        _VOCAB["v"] = build_joint_vocab(train_bpe(SENTENCES, 60), train_bpe(ph, 40, PHONEME))
    return _VOCAB["v"]


class TestJointVocabulary:
    def test_sizes(self, vocab):
        assert vocab.total_size == NUM_SPECIALS + len(vocab.word_model) + len(vocab.phoneme_model)

    def test_types_partition(self, vocab):
        types = [vocab.type_of(i) for i in range(vocab.total_size)]
        assert types[:NUM_SPECIALS] == ["special"] * NUM_SPECIALS
        lo, hi = vocab.word_range
        plo, phi = vocab.phoneme_range
        assert hi == plo and phi == vocab.total_size and lo == NUM_SPECIALS
        assert all(t == WORD for t in types[lo:hi])
        assert all(t == PHONEME for t in types[plo:phi])
        assert set(np.unique(vocab.type_array)) == {TYPE_WORD, TYPE_PHONEME, TYPE_SPECIAL}

    def test_phoneme_tokens_typed(self, vocab):
        for tok in vocab.phoneme_model.id_to_token:
            ids = vocab.encode(tok, PHONEME)
            assert all(vocab.type_array[i] == TYPE_PHONEME for i in ids)

    def test_json_round_trip(self, vocab, tmp_path):
        path = tmp_path / "vocab.json"
        vocab.save(path)
        again = JointVocabulary.load(path)
        assert again.to_json() == vocab.to_json()
        for s in SENTENCES:
            assert again.encode(s) == vocab.encode(s)

    def test_rejects_oversized_phoneme_model(self):
        tokens = [f"X{i}" for i in range(601)]
        with pytest.raises(VocabularyError):
            JointVocabulary(train_bpe(["a"], 0), BpeModel(PHONEME, tokens, []))
