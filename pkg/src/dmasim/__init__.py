"""Dynamic metasurface antenna link simulator."""

__version__ = "0.1.0"
