"""Evaluation harness - MAP@K, macro F1 and embedding ranking."""
