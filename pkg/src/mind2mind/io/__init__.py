"""Datasets, checkpoints, experiment configs and reports."""
