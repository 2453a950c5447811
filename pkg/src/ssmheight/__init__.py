"""Multi-task building segmentation and height estimation on selective state-space scans."""

__version__ = "0.1.0"
