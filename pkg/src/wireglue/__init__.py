"""Joint point and line matching over wireframe graphs."""

__version__ = "0.1.0"
