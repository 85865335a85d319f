"""Pipeline orchestration, configuration and the command-line entry point."""
