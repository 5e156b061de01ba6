"""Learn feature-space dependency constraints from binary corpora and use
them to harden linear malware detectors."""

__version__ = "0.1.0"
