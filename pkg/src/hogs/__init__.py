"""hogs: desk-scale composed human-object Gaussian splatting on the CPU.

An articulated toy body and a rigid object are deformed, turned into 3D
Gaussians, rendered jointly by differentiable splatting, and optimized under
image losses plus SDF-based attraction/repulsion losses restricted to
predicted contact regions.
"""

__version__ = "0.1.0"

CHECKPOINT_VERSION = 1
SDF_CACHE_VERSION = 1
