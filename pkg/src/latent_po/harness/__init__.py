"""Experiment harness: config, file formats, command pipelines and the CLI."""
