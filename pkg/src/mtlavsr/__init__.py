"""Multi-task audio-visual speech recognition workbench."""

__version__ = "0.1.0"
