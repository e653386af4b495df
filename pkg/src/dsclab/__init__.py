"""Domain-sensitivity collapse laboratory."""
