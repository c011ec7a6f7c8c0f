"""Multi-behavior sequential recommenders with dynamic capsule routing."""

__version__ = "0.1.0"
