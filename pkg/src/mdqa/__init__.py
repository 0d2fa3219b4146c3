"""Multi-document question answering: decompose, retrieve, aggregate."""

__version__ = "0.1.0"
