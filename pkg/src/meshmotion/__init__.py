"""Transfer motion from monocular video onto static humanoid meshes through a parametric body proxy."""

__version__ = "0.1.0"
