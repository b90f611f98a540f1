"""Dual-stream patient memory: delta extraction and FHIR reconciliation, with an evaluation harness."""

__version__ = "0.1.0"
