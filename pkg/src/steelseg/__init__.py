"""Steel surface defect segmentation: RLE masks, balanced augmentation, DeepLabV3+."""

__version__ = "0.1.0"
