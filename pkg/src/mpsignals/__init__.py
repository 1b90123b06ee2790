"""Multi-party, multimodal causal transformer for social signal prediction."""

__version__ = "0.1.0"
