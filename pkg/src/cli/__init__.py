"""Command-line surface: experiment directories, handlers and report writers."""
