"""Ground-remote alignment at desk scale: train a small satellite-tile encoder
against a frozen ground-image/text embedding space with multi-positive
contrastive losses, then evaluate zero-shot classification, retrieval,
segmentation and density mapping on a synthetic geospatial world.
"""

__version__ = "0.1.0"
