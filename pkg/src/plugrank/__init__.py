"""Desk-scale content-pretrained plug-in CTR model and unified multi-task ranker."""

__version__ = "0.1.0"
