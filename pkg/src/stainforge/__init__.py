"""stainforge: adaptive color deconvolution stain normalization for H&E
histopathology images, with augmentation, dataset-split, and
classifier-evaluation tooling."""

__version__ = "0.1.0"
