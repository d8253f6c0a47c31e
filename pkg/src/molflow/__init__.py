"""Flow-based molecular graph generation with 3D-geometry conditioning."""

__version__ = "0.1.0"
