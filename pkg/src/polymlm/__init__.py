"""Desk-scale multilingual masked-LM pretraining and evaluation toolkit."""

__version__ = "0.1.0"
