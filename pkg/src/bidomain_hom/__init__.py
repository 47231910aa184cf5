"""Two-level homogenization of the cardiac bidomain model on voxel grids.

Submodules: ``geometry`` (reference cells, tiled domains), ``fem``
(d-linear voxel meshes), ``cell_solver`` (correctors and effective
tensors), ``unfolding`` (periodic unfolding operators), ``ionic``
(FitzHugh-Nagumo model and its structural assumptions), ``macro_solver``
(homogenized bidomain), ``micro_solver`` (resolved simulation and the
convergence study), ``config`` and ``cli``.  Nothing is imported eagerly so
that ``--threads`` can still configure the numerical libraries.
"""

__version__ = "0.1.0"

__all__ = ["cell_solver", "cli", "config", "errors", "fem", "geometry", "ionic", "macro_solver",
           "micro_solver", "unfolding", "vtk"]
