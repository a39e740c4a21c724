"""divergen: deterministic construction of diversity-enhanced generative
instance-segmentation datasets, plus the companion distribution-discrepancy
analysis toolkit."""

__version__ = "0.1.0"
