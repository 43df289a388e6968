"""Shell-guided volumetric renderer with signed-ray-distance sampling."""

__version__ = "0.1.0"
