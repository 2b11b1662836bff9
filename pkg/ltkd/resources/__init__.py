"""Packaged experiment presets."""
