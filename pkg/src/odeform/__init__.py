"""Correspondence-free deformation of raw triangle meshes.

Preprocessing (cleanup, lattice subdivision, virtual links, skeleton graph),
two deformation back-ends (explicit Levenberg-Marquardt and a neural-ODE flow),
dense transfer and evaluation metrics.
"""

from .mesh import TriMesh, load_mesh, save_mesh, normalize, clean_mesh
from .pipeline import PipelineConfig, run_pipeline

__all__ = ["TriMesh", "load_mesh", "save_mesh", "normalize", "clean_mesh", "PipelineConfig", "run_pipeline"]
__version__ = "0.1.0"
