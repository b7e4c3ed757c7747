"""Automatic rigging of T-pose humanoid meshes from a front view and 2D joints."""

__version__ = "0.1.0"
