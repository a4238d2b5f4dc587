"""Matrix-free geometric multigrid for the Laplacian on a spherical shell.

Interior stencils of the blended tetrahedral hierarchy can be replaced by
low-degree polynomial surrogates fitted once per macro element and level.
"""
from .mesh import MacroMesh, generate_shell_mesh, read_mesh, write_mesh
from .multigrid import CycleSpec, OperatorMode, build_hierarchy, solve
from .space import LevelSpace
from .surrogate import fit_surrogates

__version__ = "0.1.0"

__all__ = [
    "MacroMesh", "generate_shell_mesh", "read_mesh", "write_mesh", "LevelSpace",
    "fit_surrogates", "OperatorMode", "CycleSpec", "build_hierarchy", "solve",
]
