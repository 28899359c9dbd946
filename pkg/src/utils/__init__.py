"""Error types, parameter checks and report formatting."""
