"""Open-set malware family recognition with a conservative novelty synthesizer."""

__version__ = "0.1.0"
