"""layersplat: layered 2D-Gaussian human avatars.

Reconstructs a subject from multi-view images as layers of planar Gaussian
surfels, decomposes body and garment, inpaints occluded regions through a
guidance service (or a deterministic mock), extracts meshes, and recomposes
layers for virtual try-on under novel poses.
"""

__version__ = "0.1.0"

from .core import (Camera, Gaussian2D, GaussianLayer, LbsGrid, SegColors,
                   SkinnedTemplate, Violation, concat_layers,
                   layer_from_gaussians, sample_layer_from_mesh,
                   validate_layer)
from .imageproc import psnr, ssim

__all__ = [
    "Camera", "Gaussian2D", "GaussianLayer", "LbsGrid", "SegColors",
    "SkinnedTemplate", "Violation", "concat_layers", "layer_from_gaussians",
    "sample_layer_from_mesh", "validate_layer", "psnr", "ssim", "__version__",
]
