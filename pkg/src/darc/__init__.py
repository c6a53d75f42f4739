"""Distribution-aware re-coloring model for generalizable nucleus segmentation."""

__version__ = "0.1.0"
