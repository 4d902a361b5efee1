"""Discrete-event simulation and capacity planning for disaggregated recommendation inference."""

from __future__ import annotations

__version__ = "0.1.0"
