"""Radiative transfer with reflective boundary conditions.

Integral formulation on tetrahedral meshes: the mean intensity at the mesh
vertices is a volume integral of the source function plus a surface integral
of the prescribed emission, both taken along straight and singly reflected
rays. The dense operators are stored as H-matrices built by adaptive cross
approximation and the temperature follows from a monotone fixed point.
"""
from .geometry import AbsorptionModel, PlanarReflector
from .mesh import SurfaceMesh, VolumeMesh, load_surface_mesh, load_volume_mesh
from .scenarios import Scenario, kobayashi
from .solver import assemble_problem, run
from .spectral import SpectralGrid, solve_temperature

__version__ = "0.1.0"

__all__ = [
    "AbsorptionModel", "PlanarReflector", "SurfaceMesh", "VolumeMesh", "load_surface_mesh", "load_volume_mesh",
    "Scenario", "kobayashi", "assemble_problem", "run", "SpectralGrid", "solve_temperature",
]
