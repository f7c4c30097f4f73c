"""Dataset selection - query construction and post retrieval."""
