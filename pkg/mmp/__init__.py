"""Decentralized controller synthesis for coupled agents under timed missions"""

__version__ = "0.1.0"
