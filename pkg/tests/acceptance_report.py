"""Shared store for acceptance criterion outcomes, printed at the end of the run."""
RESULTS: dict[int, str] = {}
