"""Storage fault injection: fault models, interposed file operations, campaigns,
and HDF5 metadata fault analysis."""

__version__ = "0.1.0"
