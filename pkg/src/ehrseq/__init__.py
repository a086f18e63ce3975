"""Sequence modeling for coded patient histories: corpus tooling, a small
taped-autodiff core, a masked-token encoder, embedding analytics, evaluation
harnesses, insurance risk scoring, and a query service."""

__version__ = "0.1.0"
