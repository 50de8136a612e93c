"""Triplane radiance fields, volume rendering and diffusion-guided finetuning
on procedural scenes. Submodules are imported on demand."""

__version__ = "0.1.0"

__all__ = ["diffusion", "evalcli", "field", "geometry", "ngd", "optimize", "renderer", "scenes",
           "tensorio"]
