"""Integration - LLM, embedding and social-media source providers."""
