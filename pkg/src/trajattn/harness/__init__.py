"""Experiment harness: synthetic moving-dot data, toy training, CLI."""
