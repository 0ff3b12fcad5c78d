"""Bundled experiment presets (``*.cfg`` in the flat key = value format)."""
