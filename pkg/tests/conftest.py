import numpy as np
import pytest

from phonemlm.forge import g2p, load_lexicon
from phonemlm.tokenizer import PHONEME, WORD, build_joint_vocab, train_bpe

SENTENCES = [
    "the cat sat on the mat",
    "a dog ran far away from home",
    "big red apples fall in the autumn",
    "she sells sea shells by the shore",
    "book a flight to boston tomorrow",
    "please play some music in the kitchen",
    "what is the weather like in paris",
    "the quick brown fox jumps over the lazy dog",
]


@pytest.fixture(scope="session")
def lexicon():
    return load_lexicon()


@pytest.fixture(scope="session")
def phoneme_lines(lexicon):
    return [" ".join(g2p(s, lexicon)) for s in SENTENCES]


@pytest.fixture(scope="session")
def vocab(phoneme_lines):
    word_model = train_bpe(SENTENCES, 60, WORD)
    phoneme_model = train_bpe(phoneme_lines, 40, PHONEME)
    return build_joint_vocab(word_model, phoneme_model)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# pass/fail lines from tests/test_acceptance.py, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
