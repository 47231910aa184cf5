"""Periodic corrector problems and effective conductivity tensors.

For a cell, a symmetric conductivity field ``M`` and a subregion ``S`` (the
cytoplasm of a micro cell, or one phase of a meso cell) the corrector of
direction ``e_q`` is the zero-mean periodic field ``theta_q`` with

    int_S M (grad theta_q + e_q) . grad phi = 0     for all periodic phi.

Removed voxels leave a natural no-flux boundary, and the derivative of
``M`` never appears, so laminates and other discontinuous fields are
handled directly.  The effective tensor is the cell average (over the full
cell volume, so the volume fraction is built in)

    Mt[p, q] = 1/|cell| int_S (M (e_q + grad theta_q))_p.

The intracellular conductivity is homogenized twice: first on the micro
cell for every distinct ``M_i(y, .)``, then on the intracellular part of the
meso cell with the resulting ``y``-dependent tensor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import (
    InconsistentDoubleIntegral,
    MismatchedCorrectors,
    NotPositiveDefinite,
    SingularSystem,
)
from .fem import VoxelMesh, pcg
from .geometry import Tag, UnitCellGeometry

DEFAULT_RTOL = 1e-10


@dataclass(frozen=True)
class SpdTensor:
    """Symmetric d x d conductivity with ellipticity bounds ``alpha <= eig <= beta``.

    ``strict=False`` admits semi-definite tensors, which arise as effective
    tensors of geometries that do not percolate in every direction.
    """

    matrix: np.ndarray
    alpha: float | None = None
    beta: float | None = None
    strict: bool = True

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("conductivity must be a square matrix")
        scale = max(1.0, float(np.abs(m).max()))
        if np.abs(m - m.T).max() > 1e-12 * scale:
            raise ValueError("conductivity must be symmetric")
        m = 0.5 * (m + m.T)
        m.setflags(write=False)
        eig = np.linalg.eigvalsh(m)
        alpha = float(eig[0]) if self.alpha is None else float(self.alpha)
        beta = float(eig[-1]) if self.beta is None else float(self.beta)
        tol = 1e-12 * scale
        if eig[0] < alpha - tol or eig[-1] > beta + tol:
            raise ValueError(f"eigenvalues {eig} outside the bounds [{alpha}, {beta}]")
        if self.strict and not alpha > 0:
            raise NotPositiveDefinite(f"conductivity is not positive definite (eigenvalues {eig})")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)

    @property
    def dim(self):
        return self.matrix.shape[0]

    @property
    def eigenvalues(self):
        return np.linalg.eigvalsh(self.matrix)

    def is_positive_definite(self):
        return bool(self.eigenvalues[0] > 0)

    def scaled(self, factor):
        return SpdTensor(factor * self.matrix, strict=self.strict)

    @classmethod
    def isotropic(cls, value, dim):
        return cls(value * np.eye(dim))

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.matrix, dtype=dtype)


@dataclass(frozen=True)
class TensorField:
    """A conductivity tensor per voxel of a cell grid, array of shape (*resolution, d, d)."""

    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        d = v.shape[-1]
        if v.ndim != d + 2 or v.shape[-2] != d:
            raise ValueError("tensor field must have shape (*resolution, d, d) with len(resolution) = d")
        if np.abs(v - np.swapaxes(v, -1, -2)).max(initial=0.0) > 1e-12 * max(1.0, np.abs(v).max(initial=0.0)):
            raise ValueError("tensor field must be symmetric at every voxel")
        if v.size and np.linalg.eigvalsh(v.reshape(-1, d, d)).min() <= 0:
            raise NotPositiveDefinite("tensor field must be positive definite at every voxel")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def dim(self):
        return self.values.shape[-1]

    @property
    def resolution(self):
        return self.values.shape[:-2]

    @classmethod
    def constant(cls, cell, matrix):
        m = np.asarray(matrix, dtype=float)
        if m.ndim == 0:
            m = m * np.eye(cell.dim)
        return cls(np.broadcast_to(m, tuple(cell.resolution) + m.shape).copy())

    @classmethod
    def laminate(cls, cell, m1, m2, axis=0, split=0.5):
        """Isotropic ``m1`` where ``y_axis < split * length``, ``m2`` elsewhere."""
        centers = cell.voxel_centers()[..., axis]
        first = centers < split * cell.cell_lengths[axis]
        eye = np.eye(cell.dim)
        vals = np.where(first[..., None, None], m1 * eye, m2 * eye)
        return cls(vals)

    def bounds(self):
        eig = np.linalg.eigvalsh(self.values.reshape(-1, self.dim, self.dim))
        return float(eig.min()), float(eig.max())

    def key(self):
        return self.values.tobytes()


@dataclass
class CorrectorSet:
    """The d correctors of one cell problem, as nodal values on ``mesh``."""

    cell: UnitCellGeometry
    tensor: TensorField
    subregion_tag: Tag
    mesh: VoxelMesh
    fields: list
    residuals: list
    iterations: list
    stiffness: object = field(repr=False, default=None)
    loads: list = field(repr=False, default=None)

    def grid(self, q):
        """Corrector ``q`` on the periodic node grid (NaN off the subregion)."""
        return self.mesh.to_grid(self.fields[q])

    def mean(self, q):
        return self.mesh.mean(self.fields[q])


class _CellSystem:
    def __init__(self, cell, tensor, subregion_tag):
        if tuple(tensor.resolution) != tuple(cell.resolution):
            raise ValueError("tensor field resolution differs from the cell resolution")
        mask = cell.mask(subregion_tag)
        if not mask.any():
            raise SingularSystem(f"subregion {Tag(subregion_tag).name} is empty")
        self.mesh = VoxelMesh(cell.resolution, tuple(cell.spacing), mask, periodic=True)
        self.M = tensor.values[mask]
        self.K = self.mesh.stiffness(self.M)
        self.diag_inv = 1.0 / self.K.diagonal()
        d = cell.dim
        self.loads = [self.mesh.flux_load(self.M, np.eye(d)[q]) for q in range(d)]
        self.maxiter = int(50 * round(self.mesh.n_nodes ** (1.0 / d)) * d)

    def solve(self, q, rtol, maxiter=None):
        b = self.loads[q]
        if abs(b.sum()) > 1e-12 * max(np.abs(b).sum(), 1e-300):
            raise SingularSystem(f"right-hand side of direction {q} violates the compatibility condition")
        theta, info = pcg(self.K, b, rtol=rtol, maxiter=maxiter or self.maxiter, precond=self.diag_inv,
                          project_constant=True)
        theta -= self.mesh.mean(theta)
        return theta, info


def _system(cell, tensor, subregion_tag, cache={}):
    key = (hash(cell), tensor.key(), int(subregion_tag))
    sysm = cache.get(key)
    if sysm is None:
        if len(cache) > 32:
            cache.clear()
        sysm = cache[key] = _CellSystem(cell, tensor, subregion_tag)
    return sysm


def solve_cell_problem(cell, tensor, subregion_tag, q, rtol=DEFAULT_RTOL, maxiter=None):
    """Zero-mean periodic corrector for direction ``q`` on the tagged subregion.

    Returns the nodal values on the active nodes of the subregion mesh
    together with the solver info (iterations, relative residual).
    ``maxiter`` defaults to ``50 N**(1/d) d`` for ``N`` unknowns.
    """
    sysm = _system(cell, tensor, subregion_tag)
    return sysm.solve(q, rtol, maxiter)


def solve_correctors(cell, tensor, subregion_tag, rtol=DEFAULT_RTOL, maxiter=None):
    sysm = _system(cell, tensor, subregion_tag)
    fields, res, its = [], [], []
    for q in range(cell.dim):
        theta, info = sysm.solve(q, rtol, maxiter)
        fields.append(theta)
        res.append(info["residual"])
        its.append(info["iterations"])
    return CorrectorSet(cell, tensor, Tag(subregion_tag), sysm.mesh, fields, res, its,
                        stiffness=sysm.K, loads=sysm.loads)


def _check_match(cell, tensor, subregion_tag, correctors):
    if (correctors.cell != cell or correctors.tensor.key() != tensor.key()
            or int(correctors.subregion_tag) != int(subregion_tag)):
        raise MismatchedCorrectors("correctors were solved for a different cell, tensor or subregion")


def effective_forms(cell, tensor, subregion_tag, correctors):
    """Energy and flux evaluations of the effective tensor.

    ``flux[p, q] = 1/|cell| int (M (e_q + grad theta_q))_p`` is the direct
    quadrature of the averaged flux; ``energy[p, q] = 1/|cell| int M (e_q +
    grad theta_q) . (e_p + grad theta_p)`` equals it for exact correctors and
    is symmetric by construction.
    """
    _check_match(cell, tensor, subregion_tag, correctors)
    d = cell.dim
    mesh = correctors.mesh
    M = tensor.values[cell.mask(subregion_tag)]
    base = M.sum(axis=0) * mesh.voxel_volume
    K = correctors.stiffness
    b = correctors.loads
    th = correctors.fields
    flux = np.empty((d, d))
    energy = np.empty((d, d))
    for p in range(d):
        for q in range(d):
            flux[p, q] = base[p, q] - b[p] @ th[q]
            energy[p, q] = base[p, q] - b[p] @ th[q] - b[q] @ th[p] + th[p] @ (K @ th[q])
    vol = cell.volume
    energy = 0.5 * (energy + energy.T)
    return {"energy": energy / vol, "flux": flux / vol}


def effective_tensor(cell, tensor, subregion_tag, correctors, normalize_by="cell_volume"):
    """Effective conductivity of the subregion, divided by the full cell volume."""
    if normalize_by != "cell_volume":
        raise ValueError("only normalization by the cell volume is supported")
    forms = effective_forms(cell, tensor, subregion_tag, correctors)
    return SpdTensor(forms["energy"], strict=False)


def homogenize_cell(cell, tensor, subregion_tag, rtol=DEFAULT_RTOL, maxiter=None):
    """Solve all correctors and return ``(SpdTensor, CorrectorSet)``."""
    corr = solve_correctors(cell, tensor, subregion_tag, rtol=rtol, maxiter=maxiter)
    return effective_tensor(cell, tensor, subregion_tag, corr), corr


def cell_energy(cell, tensor, subregion_tag, psi, q):
    """``1/|cell| int M (grad psi + e_q) . (grad psi + e_q)`` for a nodal trial field ``psi``."""
    sysm = _system(cell, tensor, subregion_tag)
    M = sysm.M
    base = M[:, q, q].sum() * sysm.mesh.voxel_volume
    b = sysm.loads[q]
    return float(base - 2.0 * b @ psi + psi @ (sysm.K @ psi)) / cell.volume


def cell_mesh(cell, subregion_tag):
    return VoxelMesh(cell.resolution, tuple(cell.spacing), cell.mask(subregion_tag), periodic=True)


def voigt_bound(cell, tensor, subregion_tag):
    """Cell average of ``M`` restricted to the subregion (zero elsewhere)."""
    mask = cell.mask(subregion_tag)
    return tensor.values[mask].sum(axis=0) * cell.voxel_volume / cell.volume


# ---------------------------------------------------------------------------
# two-level homogenization

@dataclass
class TwoLevelResult:
    """Outcome of the micro-then-meso homogenization of the intracellular conductivity."""

    first_level: TensorField          # Mt_i on the meso cell (identity on EXTRA voxels, unused)
    first_level_samples: dict         # distinct micro tensor key -> SpdTensor
    second_level: SpdTensor           # Mtt_i (energy form)
    first_line: np.ndarray            # y-integral of Mt_i (grad chi + I) / |Y|
    second_line: np.ndarray           # double z,y integral / (|Y||Z|)
    micro_correctors: dict            # key -> CorrectorSet
    meso_correctors: CorrectorSet
    sample_map: np.ndarray            # per Y_i voxel: index into the list of distinct keys
    keys: list


def _micro_flux_average(micro_cell, micro_tensor, corr):
    """``1/|Z| int_{Z_c} (M (e_k + grad_z theta_k))_p`` by voxel quadrature of the gradients."""
    d = micro_cell.dim
    mesh = corr.mesh
    M = micro_tensor.values[micro_cell.mask(Tag.CYTO)]
    out = np.empty((d, d))
    for k in range(d):
        grads = mesh.gradient_integrals(corr.fields[k])           # (n_vox, d)
        integrand = M[:, :, k] * mesh.voxel_volume + np.einsum("vpl,vl->vp", M, grads)
        out[:, k] = integrand.sum(axis=0)
    return out / micro_cell.volume


def two_level_homogenize(micro_cell, M_i, meso_cell, samples_y=None, rtol=DEFAULT_RTOL, check_tol=1e-8,
                         maxiter=None):
    """Homogenize the intracellular conductivity over the micro cell, then over ``Y_i``.

    ``M_i`` is either a ``TensorField`` on the micro cell (independent of
    ``y``) or a callable ``y -> TensorField`` evaluated at the sample points
    (default: centers of the intracellular meso voxels).  One set of micro
    correctors is solved per distinct micro tensor field.

    The second-level tensor is evaluated twice, once as the ``y``-integral
    of the first-level tensor applied to ``grad chi + I`` and once as the
    double ``(z, y)`` integral built from the micro correctors; the two must
    agree within ``check_tol``.
    """
    d = meso_cell.dim
    intra = meso_cell.mask(Tag.INTRA)
    n_intra = int(intra.sum())
    if samples_y is None:
        samples_y = meso_cell.voxel_centers()[intra]
    samples_y = np.asarray(samples_y, dtype=float).reshape(-1, d)
    if len(samples_y) != n_intra:
        raise ValueError("samples_y must hold one point per intracellular meso voxel")

    keys, fields, sample_map = [], {}, np.empty(n_intra, dtype=np.int64)
    if isinstance(M_i, TensorField):
        keys.append(M_i.key())
        fields[keys[0]] = M_i
        sample_map[:] = 0
    else:
        index = {}
        for s, y in enumerate(samples_y):
            tf = M_i(y)
            k = tf.key()
            if k not in index:
                index[k] = len(keys)
                keys.append(k)
                fields[k] = tf
            sample_map[s] = index[k]

    micro_corr, micro_tensor, micro_flux = {}, {}, {}
    for k in keys:
        tf = fields[k]
        corr = solve_correctors(micro_cell, tf, Tag.CYTO, rtol=rtol, maxiter=maxiter)
        micro_corr[k] = corr
        micro_tensor[k] = effective_tensor(micro_cell, tf, Tag.CYTO, corr)
        micro_flux[k] = _micro_flux_average(micro_cell, tf, corr)

    vals = np.broadcast_to(np.eye(d), tuple(meso_cell.resolution) + (d, d)).copy()
    per_voxel = np.stack([micro_tensor[keys[j]].matrix for j in sample_map])
    vals[intra] = per_voxel
    first_level = TensorField(vals)

    meso_corr = solve_correctors(meso_cell, first_level, Tag.INTRA, rtol=rtol, maxiter=maxiter)
    forms = effective_forms(meso_cell, first_level, Tag.INTRA, meso_corr)
    first_line = forms["flux"]

    # double integral: z-integral per sample from the micro correctors, y-integral by voxels
    mesh = meso_corr.mesh
    F = np.stack([micro_flux[keys[j]] for j in sample_map])          # (n_vox, d, d)
    second = np.zeros((d, d))
    for q in range(d):
        gy = mesh.gradient_integrals(meso_corr.fields[q])             # (n_vox, d)
        second[:, q] = (np.einsum("vpk,vk->p", F, gy) + F[:, :, q].sum(axis=0) * mesh.voxel_volume)
    second /= meso_cell.volume

    scale = max(1.0, float(np.abs(first_line).max()))
    gap = float(np.abs(first_line - second).max())
    if gap > check_tol * scale:
        raise InconsistentDoubleIntegral(
            f"single and double integral forms of the second-level tensor differ by {gap:.3e}")

    return TwoLevelResult(
        first_level=first_level,
        first_level_samples=micro_tensor,
        second_level=SpdTensor(forms["energy"], strict=False),
        first_line=first_line,
        second_line=second,
        micro_correctors=micro_corr,
        meso_correctors=meso_corr,
        sample_map=sample_map,
        keys=keys,
    )


def homogenize_extracellular(meso_cell, M_e, rtol=DEFAULT_RTOL, maxiter=None):
    """Effective extracellular tensor and its correctors."""
    return homogenize_cell(meso_cell, M_e, Tag.EXTRA, rtol=rtol, maxiter=maxiter)
