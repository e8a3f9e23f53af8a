"""Direct voxel-grid radiance field reconstruction on the CPU."""

__version__ = "0.1.0"
