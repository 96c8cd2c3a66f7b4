"""Unsupervised 2D-3D lifting with hierarchical block-sparse dictionaries."""

__version__ = "0.1.0"
