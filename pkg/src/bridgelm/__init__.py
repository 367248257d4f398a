"""Desk-scale vision-language bridge model with dataset-construction and judge-evaluation tooling."""

__version__ = "0.1.0"
