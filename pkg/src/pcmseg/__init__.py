"""Potts clustering of multi-subject spatial point patterns on a region grid."""

__version__ = "0.1.0"
