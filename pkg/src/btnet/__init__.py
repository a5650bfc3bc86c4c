"""Branch-to-trunk networks for multi-resolution recognition, on a numpy autograd core."""

__version__ = "0.1.0"
