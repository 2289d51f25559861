"""Joint classifier / loss-estimator training with ODIN-style OOD detection."""

__version__ = "0.1.0"
