"""Per-pixel temporal-spectrum toolkit for spotting periodic flicker artefacts in face clips."""

__version__ = "0.1.0"
