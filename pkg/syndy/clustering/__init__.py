"""Semantic clustering of claims and relation targets."""
