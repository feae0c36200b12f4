"""Variational mixture of graph experts over frequency-band EEG graphs."""
__version__ = "0.1.0"
