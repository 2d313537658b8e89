"""Low-rank separated-representation solver for PDEs on two coupled random sub-domains."""

__version__ = "0.1.0"
