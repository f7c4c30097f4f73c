"""Agents - LLM jobs: keyword generation and dataset annotation."""
