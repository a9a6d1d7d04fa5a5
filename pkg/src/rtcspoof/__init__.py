"""Toolkit for simulated RTC speech transmission and consistency-trained spoof detection."""

__version__ = "0.1.0"

from . import (audio, channel, cli, codecs, corpus, errors, evaluation,
               phoneme, synth, training)

__all__ = ["audio", "channel", "cli", "codecs", "corpus", "errors",
           "evaluation", "phoneme", "synth", "training", "__version__"]
