"""Self-supervised day/night monocular depth and ego-motion at desk scale."""

__version__ = "0.1.0"
