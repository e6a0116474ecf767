"""Multiple-instance learning with a class-token transformer and a bag embedding loss."""

__version__ = "0.1.0"
