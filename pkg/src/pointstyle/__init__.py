"""Text-guided stylization of feature point clouds with novel-view rendering."""

__version__ = "0.1.0"
