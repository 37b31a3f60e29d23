from __future__ import annotations

from . import ablate, estimate, evaluate, generate

COMMANDS = (generate, estimate, evaluate, ablate)

__all__ = ["COMMANDS"]
