"""Two-stage sparse CT segmentation: HU sparsification, sparse UNet ROI finding, ROI cropping."""

__version__ = "0.1.0"
