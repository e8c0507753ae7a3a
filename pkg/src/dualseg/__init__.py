"""Two-network semi-supervised 3D instrument segmentation with uncertainty-selected consistency."""

__version__ = "0.1.0"
