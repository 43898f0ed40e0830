"""asckit: multi-spectrogram acoustic scene classification toolkit."""

__version__ = "0.1.0"
