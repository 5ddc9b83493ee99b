"""Joint word + phoneme masked-LM toolkit for ASR-robust text encoders."""

__version__ = "0.1.0"
