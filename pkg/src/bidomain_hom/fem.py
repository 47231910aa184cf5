"""Lowest-order (d-linear) finite elements on the active voxels of a structured grid.

The same machinery serves the periodic cell problems, the macroscopic
bidomain grid and the resolved micro-geometry: a ``VoxelMesh`` keeps the
nodes touched by active voxels, so removing voxels leaves natural
(no-flux) boundaries behind.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
import scipy.sparse as sp

from .errors import SolverDivergence


@lru_cache(maxsize=None)
def _corner_offsets(d):
    return np.array(list(itertools.product((0, 1), repeat=d)), dtype=np.int64)


def _kron_all(mats):
    out = np.ones((1, 1)) if mats[0].ndim == 2 else np.ones(1)
    for m in mats:
        out = np.kron(out, m)
    return out


@lru_cache(maxsize=64)
def _reference_matrices(spacing):
    """Element integrals for a box with the given edge lengths.

    Returns ``G`` with ``G[p, q, a, b] = int dphi_a/dx_p dphi_b/dx_q`` and
    ``g`` with ``g[p, a] = int dphi_a/dx_p``.
    """
    h = np.asarray(spacing, dtype=float)
    d = len(h)
    stiff = [np.array([[1.0, -1.0], [-1.0, 1.0]]) / hk for hk in h]
    mass = [hk * np.array([[1 / 3, 1 / 6], [1 / 6, 1 / 3]]) for hk in h]
    # mixed[a, b] = int phi_a' phi_b over one edge
    mixed = np.array([[-0.5, -0.5], [0.5, 0.5]])
    n = 2 ** d
    G = np.zeros((d, d, n, n))
    for p in range(d):
        for q in range(d):
            factors = []
            for k in range(d):
                if k == p == q:
                    factors.append(stiff[k])
                elif k == p:
                    factors.append(mixed)
                elif k == q:
                    factors.append(mixed.T)
                else:
                    factors.append(mass[k])
            G[p, q] = _kron_all(factors)
    g = np.zeros((d, n))
    for p in range(d):
        g[p] = _kron_all([np.array([-1.0, 1.0]) if k == p else np.array([0.5, 0.5]) * h[k]
                          for k in range(d)])
    return G, g


@dataclass
class VoxelMesh:
    """Nodal Q1 discretization restricted to ``mask`` on a grid of ``shape`` voxels.

    With ``periodic=True`` opposite faces are identified (node grid ``shape``),
    otherwise the node grid is ``shape + 1``.  Active nodes are renumbered
    ``0..n_nodes-1`` in lexicographic order of the node grid.
    """

    shape: tuple
    spacing: tuple
    mask: np.ndarray
    periodic: bool = False

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.spacing = tuple(float(h) for h in np.broadcast_to(self.spacing, (len(self.shape),)))
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.shape:
            raise ValueError("mask shape does not match grid shape")

    @property
    def dim(self):
        return len(self.shape)

    @property
    def node_shape(self):
        return self.shape if self.periodic else tuple(s + 1 for s in self.shape)

    @property
    def voxel_volume(self):
        return float(np.prod(self.spacing))

    @cached_property
    def active_voxels(self):
        """Multi-indices (n_vox, d) of active voxels in lexicographic order."""
        return np.argwhere(self.mask)

    @cached_property
    def _global_corners(self):
        """Flat node-grid index of every corner of every active voxel, shape (n_vox, 2**d)."""
        idx = self.active_voxels[:, None, :] + _corner_offsets(self.dim)[None, :, :]
        if self.periodic:
            idx = idx % np.array(self.shape)
        return np.ravel_multi_index(tuple(np.moveaxis(idx, -1, 0)), self.node_shape)

    @cached_property
    def _numbering(self):
        nodes, inverse = np.unique(self._global_corners, return_inverse=True)
        return nodes, inverse.reshape(self._global_corners.shape)

    @property
    def node_ids(self):
        """Flat node-grid indices of the active nodes."""
        return self._numbering[0]

    @property
    def connectivity(self):
        """Local (active) node numbers of each active voxel's corners."""
        return self._numbering[1]

    @property
    def n_nodes(self):
        return len(self.node_ids)

    def node_multi_index(self):
        return np.stack(np.unravel_index(self.node_ids, self.node_shape), axis=-1)

    def node_coordinates(self):
        return self.node_multi_index() * np.array(self.spacing)

    def local_index(self, flat_node_ids):
        """Active-node numbers of node-grid flat indices (-1 when inactive)."""
        pos = np.searchsorted(self.node_ids, flat_node_ids)
        pos = np.clip(pos, 0, max(self.n_nodes - 1, 0))
        ok = self.node_ids[pos] == flat_node_ids if self.n_nodes else np.zeros_like(pos, bool)
        return np.where(ok, pos, -1)

    def _voxel_tensors(self, tensors):
        """Per-active-voxel (n_vox, d, d) coefficient array."""
        t = np.asarray(tensors, dtype=float)
        d = self.dim
        if t.shape == (d, d):
            return np.broadcast_to(t, (len(self.active_voxels), d, d))
        if t.shape == self.shape + (d, d):
            return t[self.mask]
        if t.shape == (len(self.active_voxels), d, d):
            return t
        raise ValueError(f"tensor array of shape {t.shape} does not fit the mesh")

    def _assemble(self, local):
        conn = self.connectivity
        n = 2 ** self.dim
        rows = np.repeat(conn, n, axis=1).ravel()
        cols = np.tile(conn, (1, n)).ravel()
        mat = sp.coo_matrix((local.ravel(), (rows, cols)), shape=(self.n_nodes, self.n_nodes))
        return mat.tocsr()

    def stiffness(self, tensors):
        """Matrix of ``int M grad(phi_a) . grad(phi_b)`` over the active voxels."""
        G, _ = _reference_matrices(self.spacing)
        M = self._voxel_tensors(tensors)
        local = np.einsum("vpq,pqab->vab", M, G, optimize=True)
        return self._assemble(local)

    def flux_load(self, tensors, direction):
        """Vector ``-int (M e) . grad(phi_a)`` for a constant vector ``e``."""
        _, g = _reference_matrices(self.spacing)
        M = self._voxel_tensors(tensors)
        Me = np.einsum("vpq,q->vp", M, np.asarray(direction, dtype=float))
        local = -np.einsum("vp,pa->va", Me, g)
        return np.bincount(self.connectivity.ravel(), weights=local.ravel(), minlength=self.n_nodes)

    def gradient_integrals(self, u):
        """Per-voxel exact integrals ``int_voxel grad u``, shape (n_vox, d)."""
        _, g = _reference_matrices(self.spacing)
        return np.einsum("pa,va->vp", g, np.asarray(u)[self.connectivity])

    @cached_property
    def lumped_mass(self):
        """``int phi_a`` for each active node (row sums of the consistent mass)."""
        w = np.full(self.connectivity.shape, self.voxel_volume / 2 ** self.dim)
        return np.bincount(self.connectivity.ravel(), weights=w.ravel(), minlength=self.n_nodes)

    @property
    def volume(self):
        return self.voxel_volume * len(self.active_voxels)

    def integral(self, u):
        return float(self.lumped_mass @ u)

    def mean(self, u):
        return self.integral(u) / self.volume

    def voxel_average(self, u):
        """Mean of a nodal field over each active voxel, (n_vox,)."""
        return np.asarray(u)[self.connectivity].mean(axis=1)

    def to_voxels(self, u, fill=0.0):
        """Voxel-sampled array over the full grid (voxel means, ``fill`` outside the mask)."""
        out = np.full(self.shape, fill, dtype=float)
        out[self.mask] = self.voxel_average(u)
        return out

    def to_grid(self, u, fill=np.nan):
        """Nodal values scattered onto the full node grid."""
        out = np.full(int(np.prod(self.node_shape)), fill, dtype=float)
        out[self.node_ids] = u
        return out.reshape(self.node_shape)

    def h1_seminorm_matrix(self):
        return self.stiffness(np.eye(self.dim))


def pcg(A, b, x0=None, rtol=1e-10, maxiter=None, precond=None, project_constant=False):
    """Jacobi-preconditioned conjugate gradients.

    Stops when ``||b - A x|| <= rtol * ||b||``.  With ``project_constant`` the
    constant vector is removed from the residual, which keeps iterates
    consistent for singular Neumann/periodic systems whose kernel is the
    constants.  Returns ``(x, info)`` with ``info`` holding the iteration count
    and relative residual; raises ``SolverDivergence`` at the iteration cap.
    """
    n = len(b)
    b = np.asarray(b, dtype=float)
    if maxiter is None:
        maxiter = 10 * n
    dinv = 1.0 / A.diagonal() if precond is None else precond
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - A @ x
    if project_constant:
        r -= r.mean()
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), {"iterations": 0, "residual": 0.0}
    z = dinv * r
    p = z.copy()
    rz = r @ z
    for it in range(1, maxiter + 1):
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        if project_constant:
            r -= r.mean()
        res = np.linalg.norm(r) / bnorm
        if res <= rtol:
            # confirm with the true residual to avoid drift
            rt = b - A @ x
            if project_constant:
                rt -= rt.mean()
            res = np.linalg.norm(rt) / bnorm
            if res <= rtol:
                return x, {"iterations": it, "residual": res}
            r = rt
        z = dinv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverDivergence(f"CG did not reach rtol={rtol} in {maxiter} iterations (residual {res:.3e})")
