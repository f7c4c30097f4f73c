"""Dataset splitting and emission."""
