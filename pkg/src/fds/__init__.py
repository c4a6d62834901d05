"""Few-shot defect segmentation.

Trains a UNet-like encoder-decoder from a handful of defect examples plus a
pool of defect-free images, using two ingredients: a regularizer that pulls
the features of predicted-background regions toward normal-image features,
and a crop-and-paste augmentation whose synthetic composites are weighted by
a feature-similarity realism score.
"""

__version__ = "0.1.0"
