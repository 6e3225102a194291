"""Experiment orchestration and command-line interface."""
