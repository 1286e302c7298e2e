"""Semi-supervised joint TTS/ASR training with cycle and speaker-consistency losses."""

__version__ = "0.1.0"
