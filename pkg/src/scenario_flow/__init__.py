"""Scenario Flow: text-conditioned daily power scenarios via rectified flow."""

__version__ = "0.1.0"
