"""Contact-mask transformer for tabletop pick-and-place, in plain numpy."""

__version__ = "0.1.0"
