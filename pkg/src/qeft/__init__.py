"""Mixed-precision weight quantization with weak-column fine-tuning, desk scale."""

__version__ = "0.1.0"
