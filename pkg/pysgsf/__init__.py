"""SGSFormer tools: segmentation-guided sparse Transformer restoration of
under-display-camera images, with its own degradation simulator."""

__version__ = '0.1.0'
