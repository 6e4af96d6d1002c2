"""Segment-paste pair synthesis and class-queue contrastive pre-training."""

__version__ = "0.1.0"
