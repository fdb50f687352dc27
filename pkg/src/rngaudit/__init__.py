"""Randomness audit toolkit.

Seven NIST SP 800-22 statistical tests, labeled-corpus generation via
augmentation of cryptographically random bits, and encoder-only Transformer /
LSTM classifiers that predict, per sequence, the probability of passing each
test.
"""

__version__ = "0.1.0"

from rngaudit.bitstream import BitSequence, TokenSequence  # noqa: F401
from rngaudit.sts import TestId, PValueReport, LabelPolicy  # noqa: F401
