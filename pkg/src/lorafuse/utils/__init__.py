"""Utility helpers: logging, console output, validation, image files."""
