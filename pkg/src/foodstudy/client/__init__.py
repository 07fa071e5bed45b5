"""Command-line food-record client (capture, sync, review, status, foods)."""
