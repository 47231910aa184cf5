"""Discrete unfolding operators on voxel-sampled fields of the tiled domain.

A field sampled at the voxels of the tiled grid is rearranged into an array
indexed by (meso cell ``k``, local voxel ``y``), so that the value at
``(k, y)`` is the value at the voxel ``eps * (k * l_Y + y)``.  The micro
version splits the local index once more into (micro cell, local ``z``
voxel).  Nothing is interpolated: every operator here is a reshape and a
transpose, so the multiset of values is preserved and the inverse
(``fold``) is exact.

Discrete derivatives are one-sided forward differences that wrap around
inside a block (an eps-cell, or a micro cell for the ``z`` gradient).  With
this choice the gradient-scaling identities of the unfolding calculus hold
exactly, up to floating point rounding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ResolutionMismatch
from .geometry import Tag, TiledTag, find_facets, tile_microdomain


@dataclass
class UnfoldedField:
    """Values indexed ``(..., cell, local)``; leading axes (e.g. time) are kept.

    ``cells`` is the number of meso cells per axis and ``local_shape`` the
    shape of the local grid.  For micro unfoldings ``local_shape`` is
    ``micro_cells + micro_local`` (``2 d`` axes) and ``split`` is ``d``.
    """

    values: np.ndarray
    cells: tuple
    local_shape: tuple
    macro_samples: np.ndarray = field(repr=False)
    local_samples: np.ndarray = field(repr=False)
    mask: np.ndarray | None = field(default=None, repr=False)
    split: int | None = None

    @property
    def n_cells(self):
        return int(np.prod(self.cells))

    @property
    def n_local(self):
        return int(np.prod(self.local_shape))

    def cells_view(self):
        """Values reshaped to ``(..., *cells, *local_shape)``."""
        lead = self.values.shape[:-2]
        return self.values.reshape(lead + tuple(self.cells) + tuple(self.local_shape))

    def masked(self, fill=np.nan):
        if self.mask is None:
            return self.values
        return np.where(self.mask, self.values, fill)

    def __add__(self, other):
        return _like(self, self.values + _vals(other))

    def __sub__(self, other):
        return _like(self, self.values - _vals(other))

    def __mul__(self, other):
        return _like(self, self.values * _vals(other))

    __rmul__ = __mul__


def _vals(x):
    return x.values if isinstance(x, UnfoldedField) else x


def _like(u, values):
    return UnfoldedField(values, u.cells, u.local_shape, u.macro_samples, u.local_samples, u.mask, u.split)


def _check_grid(field_values, spec):
    d = spec.dim
    if tuple(field_values.shape[-d:]) != tuple(spec.grid_shape):
        raise ResolutionMismatch(
            f"field grid {field_values.shape[-d:]} does not match the tiled grid {spec.grid_shape}")


def _block_permutation(lead, blocks):
    """Axes order moving block indices of every axis in front of the in-block indices.

    ``blocks`` holds, per spatial axis, the number of nested factors the axis
    was split into.  The result groups factor 0 of every axis, then factor 1,
    and so on.
    """
    perm = list(range(lead))
    start = [lead + sum(blocks[:k]) for k in range(len(blocks))]
    for level in range(max(blocks)):
        perm.extend(start[k] + level for k in range(len(blocks)))
    return perm


def _reindex(values, factors, lead):
    """Split every spatial axis into ``factors[k]`` (outer to inner) and regroup by level."""
    shape = values.shape[:lead]
    for f in factors:
        shape += tuple(f)
    split = values.reshape(shape)
    perm = _block_permutation(lead, [len(f) for f in factors])
    return split.transpose(perm)


def _unreindex(values, factors, lead):
    nlev = len(factors[0])
    d = len(factors)
    level_shape = values.shape[:lead]
    for lev in range(nlev):
        level_shape += tuple(factors[k][lev] for k in range(d))
    arr = values.reshape(level_shape)
    perm = _block_permutation(lead, [nlev] * d)
    inv = np.argsort(perm)
    arr = arr.transpose(inv)
    return arr.reshape(values.shape[:lead] + tuple(int(np.prod(f)) for f in factors))


def _local_mask(dom, tag):
    if tag is None:
        return None
    if int(tag) == int(Tag.EXTRA):
        loc = dom.local_meso == Tag.EXTRA
    elif int(tag) == int(Tag.INTRA):
        loc = dom.local_meso == Tag.INTRA
    elif int(tag) == int(Tag.CYTO):
        loc = (dom.local_meso == Tag.INTRA) & (dom.local_micro == Tag.CYTO)
    else:
        raise ValueError(f"unsupported tag {tag!r}")
    return loc.ravel()


def _anchors(spec):
    cells = spec.cells_per_axis
    lengths = np.array([spec.epsilon * spec.meso_cell.cell_lengths[k] for k in range(spec.dim)])
    grids = np.meshgrid(*[np.arange(c) * lengths[k] for k, c in enumerate(cells)], indexing="ij")
    return np.stack(grids, axis=-1).reshape(-1, spec.dim)


def _local_centers(shape, lengths):
    h = np.asarray(lengths, dtype=float) / np.asarray(shape)
    grids = np.meshgrid(*[(np.arange(n) + 0.5) * h[k] for k, n in enumerate(shape)], indexing="ij")
    return np.stack(grids, axis=-1).reshape(-1, len(shape))


def unfold(values, spec, tag=None, domain=None):
    """Eps-cell unfolding of a voxel field on the tiled grid.

    ``values`` has shape ``(..., *spec.grid_shape)``.  ``tag`` (``Tag.INTRA``,
    ``Tag.EXTRA`` or ``Tag.CYTO``) only sets the mask of the result; values
    outside the tagged region are carried along untouched.
    """
    values = np.asarray(values)
    _check_grid(values, spec)
    d = spec.dim
    lead = values.ndim - d
    cells = spec.cells_per_axis
    res = spec.cell_resolution
    arr = _reindex(values, [(cells[k], res[k]) for k in range(d)], lead)
    out = arr.reshape(values.shape[:lead] + (int(np.prod(cells)), int(np.prod(res))))
    dom = domain if domain is not None or tag is None else tile_microdomain(spec)
    return UnfoldedField(
        out, tuple(cells), tuple(res), _anchors(spec),
        _local_centers(res, spec.meso_cell.cell_lengths),
        _local_mask(dom, tag) if tag is not None else None,
    )


def fold(u, spec):
    """Inverse of :func:`unfold`: back to ``(..., *grid_shape)``."""
    d = spec.dim
    lead = u.values.ndim - 2
    cells = spec.cells_per_axis
    res = spec.cell_resolution
    arr = u.values.reshape(u.values.shape[:lead] + tuple(cells) + tuple(res))
    return _unreindex(arr, [(cells[k], res[k]) for k in range(d)], lead)


def unfold_micro(values, spec):
    """Unfolding on both scales: values indexed ``(..., cell, micro_cell * z_local)``.

    The local index runs over ``(*micro_per_cell, *micro_resolution)``, i.e.
    the discrete ``[y/delta]_Z`` first and ``z`` second.
    """
    values = np.asarray(values)
    _check_grid(values, spec)
    d = spec.dim
    lead = values.ndim - d
    cells = spec.cells_per_axis
    m = spec.micro_per_cell
    r = spec.micro_resolution
    arr = _reindex(values, [(cells[k], m[k], r[k]) for k in range(d)], lead)
    local = tuple(m) + tuple(r)
    out = arr.reshape(values.shape[:lead] + (int(np.prod(cells)), int(np.prod(local))))
    zc = _local_centers(r, spec.micro_cell.cell_lengths)
    return UnfoldedField(out, tuple(cells), local, _anchors(spec), zc, None, split=d)


def unfold_delta(u, spec):
    """Micro-cell unfolding applied to the local grid of an eps-unfolded field."""
    d = spec.dim
    lead = u.values.ndim - 2
    m = spec.micro_per_cell
    r = spec.micro_resolution
    arr = u.values.reshape(u.values.shape[:lead] + (u.n_cells,) + tuple(u.local_shape))
    arr = _reindex(arr, [(m[k], r[k]) for k in range(d)], lead + 1)
    local = tuple(m) + tuple(r)
    out = arr.reshape(u.values.shape[:lead] + (u.n_cells, int(np.prod(local))))
    zc = _local_centers(r, spec.micro_cell.cell_lengths)
    return UnfoldedField(out, u.cells, local, u.macro_samples, zc, None, split=d)


# ---------------------------------------------------------------------------
# boundary unfolding

@dataclass
class BoundaryMap:
    """Index map from global interface facets to (cell, reference facet)."""

    cell: np.ndarray          # per global facet
    reference: np.ndarray     # per global facet, index into the reference facets
    n_cells: int
    reference_facets: object  # Facets of Gamma^y on the local grid

    @property
    def n_reference(self):
        return len(self.reference_facets)

    def coverage(self):
        """Boolean (n_cells, n_reference): which (cell, facet) pairs carry a global facet."""
        out = np.zeros((self.n_cells, self.n_reference), dtype=bool)
        out[self.cell, self.reference] = True
        return out


def _facet_key(intra_local_flat, axis, normal, d):
    return (intra_local_flat * d + axis) * 2 + (normal > 0)


def boundary_map(spec, facets=None, domain=None):
    """Locate every global membrane facet in its eps-cell and on the reference ``Gamma^y``.

    The cell of a facet is the cell of its intracellular voxel.  ``facets``
    defaults to the membrane facets of the tiled domain.
    """
    dom = domain if domain is not None else tile_microdomain(spec)
    if facets is None:
        facets = dom.membrane_facets
    d = spec.dim
    res = np.array(spec.cell_resolution)
    local_labels = np.where(dom.local_meso == Tag.INTRA, int(TiledTag.INTRA_CYTO), int(TiledTag.EXTRA))
    ref = find_facets(local_labels, spec.spacing / spec.epsilon, TiledTag.INTRA_CYTO, TiledTag.EXTRA,
                      periodic=True)
    ref_intra = np.where((ref.normal > 0)[:, None], ref.low, ref.high(tuple(res)))
    ref_keys = _facet_key(np.ravel_multi_index(tuple(ref_intra.T), tuple(res)), ref.axis, ref.normal, d)
    order = np.argsort(ref_keys)
    sorted_keys = ref_keys[order]

    glob_intra = np.where((facets.normal > 0)[:, None], facets.low, facets.high())
    cell_idx = glob_intra // res
    local = glob_intra % res
    keys = _facet_key(np.ravel_multi_index(tuple(local.T), tuple(res)), facets.axis, facets.normal, d)
    pos = np.searchsorted(sorted_keys, keys)
    pos = np.clip(pos, 0, len(sorted_keys) - 1)
    if len(keys) and not np.all(sorted_keys[pos] == keys):
        raise ResolutionMismatch("some interface facets have no counterpart on the reference cell")
    cells = np.ravel_multi_index(tuple(cell_idx.T), spec.cells_per_axis)
    return BoundaryMap(cells, order[pos], int(np.prod(spec.cells_per_axis)), ref)


def unfold_boundary(trace, spec, facets=None, domain=None, bmap=None):
    """Boundary unfolding of per-facet values to ``(..., cell, reference facet)``.

    Pairs not covered by a global facet (reference facets whose image lies on
    the outer boundary) are NaN and excluded by the returned mask.
    """
    trace = np.asarray(trace, dtype=float)
    if bmap is None:
        bmap = boundary_map(spec, facets, domain)
    if trace.shape[-1] != len(bmap.cell):
        raise ResolutionMismatch(f"trace has {trace.shape[-1]} facets, the domain has {len(bmap.cell)}")
    out = np.full(trace.shape[:-1] + (bmap.n_cells, bmap.n_reference), np.nan)
    out[..., bmap.cell, bmap.reference] = trace
    mask = bmap.coverage()
    return UnfoldedField(out, tuple(spec.cells_per_axis), (bmap.n_reference,), _anchors(spec),
                         bmap.reference_facets.low, mask)


def fold_boundary(u, bmap):
    return u.values[..., bmap.cell, bmap.reference]


# ---------------------------------------------------------------------------
# discrete calculus used by the identity checks

def broken_gradient(values, block, spacing, axes_offset=0):
    """Forward differences wrapping inside blocks of ``block`` voxels per axis.

    Returns an array with a new last axis holding the d components.
    """
    values = np.asarray(values, dtype=float)
    d = len(block)
    lead = values.ndim - d
    comps = []
    for k in range(d):
        n = values.shape[lead + k]
        j = np.arange(n)
        nxt = np.where((j + 1) % block[k] == 0, j + 1 - block[k], j + 1)
        comps.append((np.take(values, nxt, axis=lead + k) - values) / spacing[k])
    return np.stack(comps, axis=-1)


def local_gradient(u, spacing):
    """Forward differences with periodic wrap on the local grid of an unfolded field."""
    lead = u.values.ndim - 2
    arr = u.values.reshape(u.values.shape[:lead] + (u.n_cells,) + tuple(u.local_shape))
    d = len(spacing)
    start = arr.ndim - d
    comps = [(np.roll(arr, -1, axis=start + k) - arr) / spacing[k] for k in range(d)]
    g = np.stack(comps, axis=-1)
    return g.reshape(u.values.shape + (d,))


def _unfold_components(g, spec, micro=False):
    d = spec.dim
    moved = np.moveaxis(g, -1, 0)
    u = unfold_micro(moved, spec) if micro else unfold(moved, spec)
    return np.moveaxis(u.values, 0, -1)


def check_identities(u, v, spec, trace_u=None):
    """Residuals of the discrete unfolding identities for voxel fields ``u``, ``v``.

    Keys: ``product``, ``integration``, ``integration_micro``, ``gradient``,
    ``gradient_micro``, ``boundary_integration``, ``norm``, ``linearity``.
    ``trace_u`` (per membrane facet) defaults to the mean of the two voxel
    values of ``u`` adjacent to each facet.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    d = spec.dim
    eps = spec.epsilon
    Y = spec.meso_cell.volume
    Zvol = spec.micro_cell.volume
    hx = spec.spacing
    hy = hx / eps
    hz = np.array(spec.micro_cell.cell_lengths) / np.array(spec.micro_resolution)
    vox = float(np.prod(hx))
    out = {}

    Tu, Tv = unfold(u, spec), unfold(v, spec)
    out["product"] = float(np.abs(unfold(u * v, spec).values - Tu.values * Tv.values).max())

    cell_vol = eps ** d * Y
    lhs = cell_vol * float(np.prod(hy)) * Tu.values.sum() / Y
    out["integration"] = abs(lhs - vox * u.sum())

    Tm = unfold_micro(u, spec)
    m = spec.micro_per_cell
    # T_delta is constant in y over each micro cell, whose measure is delta^d |Z|
    dy_micro = float(np.prod([spec.meso_cell.cell_lengths[k] / m[k] for k in range(d)]))
    dz = float(np.prod(hz))
    lhs_m = cell_vol * dy_micro * dz * Tm.values.sum() / (Y * Zvol)
    out["integration_micro"] = abs(lhs_m - vox * u.sum())

    gy = local_gradient(Tu, hy)
    gx = broken_gradient(u, spec.cell_resolution, hx)
    out["gradient"] = float(np.abs(gy - eps * _unfold_components(gx, spec)).max())

    r = spec.micro_resolution
    gz = _micro_local_gradient(Tm, hz, d)
    gxz = broken_gradient(u, r, hx)
    out["gradient_micro"] = float(np.abs(gz - eps * spec.delta * _unfold_components(gxz, spec, micro=True)).max())

    dom = tile_microdomain(spec)
    facets = dom.membrane_facets
    if len(facets):
        if trace_u is None:
            trace_u = 0.5 * (u[tuple(facets.low.T)] + u[tuple(facets.high().T)])
        bmap = boundary_map(spec, facets, dom)
        Tb = unfold_boundary(trace_u, spec, bmap=bmap)
        ref_area = bmap.reference_facets.area
        lhs_b = cell_vol * np.nansum(Tb.values * ref_area) / (eps * Y)
        out["boundary_integration"] = abs(lhs_b - float(np.sum(facets.area * trace_u)))
    else:
        out["boundary_integration"] = 0.0

    lhs_n = np.sqrt(cell_vol * float(np.prod(hy)) * np.sum(Tu.values ** 2) / Y)
    out["norm"] = abs(lhs_n - np.sqrt(vox * np.sum(u ** 2)))

    a, b = 1.7, -0.3
    out["linearity"] = float(np.abs(unfold(a * u + b * v, spec).values - (a * Tu.values + b * Tv.values)).max())
    return out


def _micro_local_gradient(Tm, hz, d):
    lead = Tm.values.ndim - 2
    arr = Tm.values.reshape(Tm.values.shape[:lead] + (Tm.n_cells,) + tuple(Tm.local_shape))
    start = arr.ndim - d
    comps = [(np.roll(arr, -1, axis=start + k) - arr) / hz[k] for k in range(d)]
    return np.stack(comps, axis=-1).reshape(Tm.values.shape + (d,))


# ---------------------------------------------------------------------------
# two-scale smoke test

def two_scale_error(spec, g, Phi, x_samples):
    """Discrete l2 distance between ``T_eps(g(x) Phi(x/eps))`` and ``g(x) Phi(y)``.

    ``g`` and ``Phi`` are vectorized callables of points ``(..., d)``;
    ``Phi`` is periodic on the meso reference cell.  The distance is a mean
    over the fixed macroscopic sample points ``x_samples`` and all local
    voxels, so it is comparable across eps.
    """
    dom_x = tile_microdomain(spec).voxel_centers()
    eps = spec.epsilon
    ell = np.array(spec.meso_cell.cell_lengths)
    phi = g(dom_x) * Phi(np.mod(dom_x / eps, ell))
    Tu = unfold(phi, spec)
    x = np.asarray(x_samples, dtype=float).reshape(-1, spec.dim)
    k = np.floor(x / (eps * ell)).astype(np.int64)
    k = np.minimum(k, np.array(spec.cells_per_axis) - 1)
    cell = np.ravel_multi_index(tuple(k.T), spec.cells_per_axis)
    y = Tu.local_samples
    target = g(x)[:, None] * Phi(y)[None, :]
    diff = Tu.values[cell] - target
    return float(np.sqrt(np.mean(diff ** 2)))
