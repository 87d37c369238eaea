"""Part-level correspondence labels and contrastive training heads for
generalized category discovery on precomputed patch features."""
__version__ = "0.1.0"
