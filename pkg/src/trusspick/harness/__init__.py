"""Synthetic scenes, episode simulation, reports and the command line."""
