"""Exceptions raised by pysgsf."""


class SGSFError(Exception):
    """Base class of the package exceptions"""


class ConfigError(SGSFError):
    """Invalid or unknown configuration key or value"""


class CheckpointError(SGSFError):
    """Malformed, truncated or mismatching checkpoint file"""


class GraphError(SGSFError):
    """Misuse of the differentiation graph or broken model wiring"""
