"""Build DRI survey instruments from news corpora and score Deliberative Reason Index surveys."""

__version__ = "0.1.0"
