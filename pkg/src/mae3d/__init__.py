"""Masked autoencoders for 3D point cloud representation learning."""

from .kernels import BACKEND

__version__ = "0.1.0"
