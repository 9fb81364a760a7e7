"""Matryoshka representation learning: nested embeddings whose prefixes are
usable representations on their own, plus the tooling to train, evaluate and
retrieve with them."""

from __future__ import annotations

__version__ = "0.1.0"
