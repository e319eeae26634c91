"""Experiment harness: configuration, datasets, orchestration, statistics, reports and CLI."""
