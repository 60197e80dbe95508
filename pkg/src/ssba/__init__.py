"""Source-specific backdoor attacks (patch, transparency-gap and feature-trigger variants) and defences."""
__version__ = "0.1.0"
