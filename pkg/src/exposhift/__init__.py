"""Reference-guided exposure transfer with a compact illumination descriptor."""

__version__ = "0.1.0"
