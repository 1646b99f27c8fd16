"""microlocal_kit - numerical checks of semi-classical microlocal analysis on sampled h-families."""

__version__ = "0.1.0"
