"""Command-line entry point (``python ember.py <command>``)."""
