"""Noisy parallel corpus generation: G2P, error channels, WER, corpus I/O."""
from .channels import (
    ConfusionClasses,
    InsertionPool,
    NeighborIndex,
    NoiseConfig,
    default_confusion_classes,
    phoneme_noise_channel,
    word_noise_channel,
)
from .corpus import (
    WER_BUCKETS,
    CorpusRecord,
    CorpusStats,
    bucket_of,
    build_corpus,
    calibrate_phoneme_rates,
    calibrate_word_rates,
    derive_seed,
    forge_record,
    iter_corpus,
    normalize_text,
    read_corpus,
    record_config,
    write_corpus,
)
from .lexicon import ARPABET, LETTER_FALLBACK, PAUSE, Lexicon, g2p, load_lexicon, parse_lexicon
from .synthetic import KeywordTask, random_sentences
from .wer import compute_per, compute_wer, edit_distance
