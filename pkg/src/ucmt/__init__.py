"""Semi-supervised segmentation engine: collaborative mean-teacher co-training
with uncertainty-guided region mixing, on synthetic 2D data."""

__version__ = "0.1.0"
