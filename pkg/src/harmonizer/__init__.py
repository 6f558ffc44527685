"""Semantic grouping of data elements: embed, cluster, validate, label, classify."""

__version__ = "0.1.0"
