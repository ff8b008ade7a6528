"""Clean-label backdoor attack toolkit for vision transformers."""

from . import cli
from .cli import main

__all__ = ["cli", "main"]
