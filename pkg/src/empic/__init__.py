"""2D3V electromagnetic particle-in-cell simulator with task-parallel backends."""

__version__ = "0.1.0"
