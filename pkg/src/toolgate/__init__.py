"""Federated MCP tool gateway with embedding-based tool retrieval."""

__version__ = "0.1.0"
