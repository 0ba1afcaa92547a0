"""Single-image dynamic scene generation: point-cloud lifting, multi-view 3D
motion fitting, Gaussian splatting and temporal deformation on the CPU."""

__version__ = "0.1.0"
