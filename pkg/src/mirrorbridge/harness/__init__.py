"""Problem generators, the rotating-filter stream, experiment runners and the CLI."""
