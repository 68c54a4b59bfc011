"""Subcommand handlers for the solver command line."""
