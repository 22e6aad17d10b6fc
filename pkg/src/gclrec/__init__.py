"""Graph contrastive collaborative filtering with generative noise
augmentation and an item co-occurrence channel."""

__version__ = "0.1.0"
