"""Watermarking toolkit for 3D Gaussian Splatting models.

Pipeline: prune -> expert scoring -> carrier selection (SBAG) ->
densify-split -> decoupled DWT-domain finetuning -> attack/verify.
"""

from gsmark.model import Camera, GaussianModel, Role
from gsmark.render import RenderOutput, render, render_backward

__all__ = [
    "Camera",
    "GaussianModel",
    "Role",
    "RenderOutput",
    "render",
    "render_backward",
]

__version__ = "0.1.0"
