"""Test suite for scenario-flow."""
