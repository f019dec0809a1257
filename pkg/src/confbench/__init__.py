"""Benchmark for probing whether MIL attention maps track injected confounders."""

__version__ = "0.1.0"
