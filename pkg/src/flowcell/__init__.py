"""Mixed FE Darcy flow with lognormal permeability and multilevel Monte Carlo."""

from flowcell.mesh import build_uniform_mesh, mesh_hierarchy, locate_element

__all__ = ["build_uniform_mesh", "mesh_hierarchy", "locate_element"]
__version__ = "0.1.0"
