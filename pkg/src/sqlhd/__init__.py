"""Metamorphic hallucination detection for LLM Text-to-SQL generation."""

__version__ = "0.1.0"
