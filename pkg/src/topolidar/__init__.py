"""Topology-aware LiDAR scene generation: range images, graph latents, diffusion."""

__version__ = "0.1.0"
