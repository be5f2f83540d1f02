"""Occluded-image recognition via diffusion inpainting experts.

The pipeline: a small DDPM repaints occluded images several times, a shared
embedder scores every variant against a gallery, and a gating network fuses
the per-variant similarity rows in decision space before ranking identities.
"""

__version__ = "0.1.0"

from .backend import active_backend

__all__ = ["active_backend", "__version__"]
