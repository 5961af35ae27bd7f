"""Point-cloud semantic segmentation with bilateral neighborhood augmentation and adaptive fusion."""

__version__ = "0.1.0"
