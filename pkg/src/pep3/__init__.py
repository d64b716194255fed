"""Pseudonymisation of IP flow data by a five-peer transcryptor."""

__version__ = "0.1.0"
