"""In-transit ensemble statistics with streaming Robbins-Monro quantiles."""
from __future__ import annotations

__version__ = "0.1.0"
