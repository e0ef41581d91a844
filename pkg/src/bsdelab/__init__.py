"""Monte Carlo laboratory for Markovian BSDEs driven by a deterministic clock."""

from __future__ import annotations

__version__ = "0.1.0"
