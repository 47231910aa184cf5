"""Voxelized periodic reference cells and their tiling over the macroscopic domain.

Two reference cells are involved.  The meso cell ``Y`` is split into an
intracellular part (tag ``INTRA``) and an extracellular part (``EXTRA``); the
micro cell ``Z`` is split into cytoplasm (``CYTO``) and mitochondria
(``MITO``).  Tiling the meso cell with period ``eps`` and the micro cell with
period ``eps * delta`` inside every meso cell produces the perforated
domains used by the direct simulation.

Interfaces are unions of voxel faces, so every area reported here is a
staircase (l1) measure.  For smooth inclusions this does not converge to the
Euclidean perimeter: a voxelized disk of radius ``r`` has a perimeter that
tends to ``8 r`` rather than ``2 pi r``.  The membrane ratio ``|Gamma^y|/|Y|``
is computed from the same staircase facets everywhere in the package.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from .errors import (
    DisconnectedRegion,
    GeometryError,
    IncommensurateResolution,
    InvalidFraction,
)


class Tag(enum.IntEnum):
    EXTRA = 0
    INTRA = 1
    CYTO = 2
    MITO = 3


class TiledTag(enum.IntEnum):
    EXTRA = 0
    INTRA_CYTO = 1
    INTRA_MITO = 2


TAG_CHARS = {Tag.EXTRA: "E", Tag.INTRA: "I", Tag.CYTO: "C", Tag.MITO: "M"}
CHAR_TAGS = {c: t for t, c in TAG_CHARS.items()}

#: (host tag, inclusion tag) for each kind of cell
CELL_TAGS = {"meso": (Tag.EXTRA, Tag.INTRA), "micro": (Tag.CYTO, Tag.MITO)}

INCLUSION_SHAPES = ("none", "square", "disk", "cross", "channel")


@dataclass(frozen=True)
class Facets:
    """Voxel faces separating two tags.

    ``low[f]`` is the voxel on the low side of face ``f`` along ``axis[f]``;
    the high-side voxel is ``low[f] + e_axis`` (wrapped for periodic cells).
    ``normal[f]`` is +1 when the inclusion-side voxel is the low one, i.e. it
    is the sign of the outward normal of the inclusion region along ``axis``.
    """

    axis: np.ndarray
    low: np.ndarray
    normal: np.ndarray
    area: np.ndarray

    def __len__(self):
        return len(self.axis)

    def high(self, shape=None):
        hi = self.low.copy()
        hi[np.arange(len(self)), self.axis] += 1
        if shape is not None:
            hi %= np.asarray(shape)
        return hi


def _face_pairs(labels, periodic):
    """Yield (axis, low multi-index array, low labels, high labels) for all faces."""
    d = labels.ndim
    for ax in range(d):
        if periodic:
            lo = labels
            hi = np.roll(labels, -1, axis=ax)
            idx = np.indices(labels.shape).reshape(d, -1).T
            yield ax, idx, lo.ravel(), hi.ravel()
        else:
            sl_lo = [slice(None)] * d
            sl_hi = [slice(None)] * d
            sl_lo[ax] = slice(0, -1)
            sl_hi[ax] = slice(1, None)
            lo = labels[tuple(sl_lo)]
            hi = labels[tuple(sl_hi)]
            idx = np.indices(lo.shape).reshape(d, -1).T
            yield ax, idx, lo.ravel(), hi.ravel()


def find_facets(labels, spacing, tag_in, tag_out, periodic):
    """Faces between a voxel tagged ``tag_in`` and a voxel tagged ``tag_out``."""
    labels = np.asarray(labels)
    spacing = np.asarray(spacing, dtype=float)
    d = labels.ndim
    axes, lows, normals, areas = [], [], [], []
    for ax, idx, lo, hi in _face_pairs(labels, periodic):
        face_area = float(np.prod(np.delete(spacing, ax))) if d > 1 else 1.0
        out = (lo == tag_in) & (hi == tag_out)
        inn = (lo == tag_out) & (hi == tag_in)
        sel = out | inn
        n = int(sel.sum())
        if n == 0:
            continue
        axes.append(np.full(n, ax, dtype=np.int64))
        lows.append(idx[sel])
        normals.append(np.where(out[sel], 1, -1).astype(np.int64))
        areas.append(np.full(n, face_area))
    if not axes:
        return Facets(np.zeros(0, np.int64), np.zeros((0, d), np.int64),
                      np.zeros(0, np.int64), np.zeros(0))
    return Facets(np.concatenate(axes), np.concatenate(lows),
                  np.concatenate(normals), np.concatenate(areas))


def periodic_components(mask):
    """Number of face-connected components of ``mask`` on the torus."""
    mask = np.asarray(mask, dtype=bool)
    lab, n = ndimage.label(mask)
    if n <= 1:
        return n
    parent = list(range(n + 1))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for ax in range(mask.ndim):
        first = np.take(lab, 0, axis=ax)
        last = np.take(lab, -1, axis=ax)
        both = (first > 0) & (last > 0)
        for a, b in zip(first[both], last[both]):
            ra, rb = find(int(a)), find(int(b))
            if ra != rb:
                parent[ra] = rb
    return len({find(k) for k in range(1, n + 1)})


def region_percolates(mask, axis):
    """True when the periodic extension of ``mask`` contains an unbounded path along ``axis``.

    Detected by doubling the torus along ``axis``: a winding path joins a
    voxel with its own translate by one period.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return False
    doubled = np.concatenate([mask, mask], axis=axis)
    lab, n = ndimage.label(doubled)
    parent = list(range(n + 1))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for ax in range(mask.ndim):
        first = np.take(lab, 0, axis=ax)
        last = np.take(lab, -1, axis=ax)
        both = (first > 0) & (last > 0)
        for a, b in zip(first[both], last[both]):
            ra, rb = find(int(a)), find(int(b))
            if ra != rb:
                parent[ra] = rb
    n_ax = mask.shape[axis]
    a = np.take(lab, np.arange(n_ax), axis=axis)
    b = np.take(lab, np.arange(n_ax, 2 * n_ax), axis=axis)
    sel = (a > 0) & (b > 0)
    return any(find(int(x)) == find(int(y)) for x, y in zip(a[sel], b[sel]))


@dataclass(frozen=True)
class UnitCellGeometry:
    """Voxelized periodic reference cell (``Y`` for kind ``meso``, ``Z`` for ``micro``)."""

    kind: str
    cell_lengths: tuple
    labels: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.kind not in CELL_TAGS:
            raise GeometryError(f"unknown cell kind {self.kind!r}")
        labels = np.array(self.labels, dtype=np.int8)
        if labels.ndim not in (1, 2, 3):
            raise GeometryError("cells must be 1, 2 or 3 dimensional")
        lengths = tuple(float(x) for x in np.broadcast_to(self.cell_lengths, (labels.ndim,)))
        if any(x <= 0 for x in lengths):
            raise GeometryError("cell lengths must be positive")
        allowed = {int(t) for t in CELL_TAGS[self.kind]}
        if not set(np.unique(labels).tolist()) <= allowed:
            raise GeometryError(f"labels of a {self.kind} cell must be in {sorted(allowed)}")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "cell_lengths", lengths)
        for tag in CELL_TAGS[self.kind]:
            mask = labels == tag
            if mask.any() and periodic_components(mask) != 1:
                raise DisconnectedRegion(f"region {Tag(tag).name} of the {self.kind} cell is disconnected")

    @property
    def dim(self):
        return self.labels.ndim

    @property
    def resolution(self):
        return self.labels.shape

    @property
    def host_tag(self):
        return CELL_TAGS[self.kind][0]

    @property
    def inclusion_tag(self):
        return CELL_TAGS[self.kind][1]

    @property
    def spacing(self):
        return np.array(self.cell_lengths) / np.array(self.resolution)

    @property
    def volume(self):
        return float(np.prod(self.cell_lengths))

    @property
    def voxel_volume(self):
        return float(np.prod(self.spacing))

    def mask(self, tag):
        return self.labels == int(tag)

    def fraction(self, tag):
        return float(self.mask(tag).mean())

    def voxel_centers(self):
        """Array (*resolution, dim) of voxel-center coordinates."""
        h = self.spacing
        grids = np.meshgrid(*[(np.arange(n) + 0.5) * h[k] for k, n in enumerate(self.resolution)],
                            indexing="ij")
        return np.stack(grids, axis=-1)

    @cached_property
    def interface_facets(self):
        return find_facets(self.labels, self.spacing, self.inclusion_tag, self.host_tag, periodic=True)

    def roll(self, shift):
        """Cell translated by an integer number of voxels per axis (periodic)."""
        shift = tuple(int(s) for s in np.broadcast_to(shift, (self.dim,)))
        return UnitCellGeometry(self.kind, self.cell_lengths,
                                np.roll(self.labels, shift, axis=tuple(range(self.dim))))

    def percolates(self, tag, axis):
        return region_percolates(self.mask(tag), axis)

    def __eq__(self, other):
        if not isinstance(other, UnitCellGeometry):
            return NotImplemented
        return (self.kind == other.kind and self.cell_lengths == other.cell_lengths
                and np.array_equal(self.labels, other.labels))

    def __hash__(self):
        return hash((self.kind, self.cell_lengths, self.labels.tobytes()))


class InterfaceMeasure(NamedTuple):
    host_volume: float
    inclusion_volume: float
    interface_area: float


def measure_interface(cell):
    """Host volume, inclusion volume and staircase interface area of a cell."""
    vox = cell.voxel_volume
    host = float(cell.mask(cell.host_tag).sum()) * vox
    inc = float(cell.mask(cell.inclusion_tag).sum()) * vox
    area = float(cell.interface_facets.area.sum())
    return InterfaceMeasure(host, inc, area)


def membrane_ratio(meso_cell):
    """``|Gamma^y| / |Y|`` for a meso cell."""
    return measure_interface(meso_cell).interface_area / meso_cell.volume


def build_standard_cell(kind, inclusion_shape, inclusion_fraction, resolution, dim=2,
                        cell_lengths=1.0, channel_axis=0):
    """Cell with a centered, axis-aligned inclusion.

    ``inclusion_fraction`` is the linear size of the inclusion relative to the
    cell (side of a square, diameter of a disk, width of the bands of a
    cross or channel).  For a meso cell the inclusion is the intracellular
    part; for a micro cell it is the mitochondrion, which must not touch
    the cell boundary.

    Besides ``none``, ``square`` and ``disk`` two band shapes are available
    for meso cells: ``channel`` (one band running along ``channel_axis``) and
    ``cross`` (one band along every axis).  Both keep the intracellular region
    connected after tiling.
    """
    if kind not in CELL_TAGS:
        raise GeometryError(f"unknown cell kind {kind!r}")
    if inclusion_shape not in INCLUSION_SHAPES:
        raise GeometryError(f"unknown inclusion shape {inclusion_shape!r}")
    res = tuple(int(r) for r in np.broadcast_to(resolution, (dim,)))
    if min(res) < 4:
        raise GeometryError("resolution must be at least 4")
    f = float(inclusion_fraction)
    if not 0.0 <= f < 1.0:
        raise InvalidFraction(f"inclusion fraction {f} not in [0, 1)")
    lengths = np.broadcast_to(np.asarray(cell_lengths, dtype=float), (dim,))
    host, inc = CELL_TAGS[kind]

    h = lengths / np.array(res)
    centers = np.meshgrid(*[(np.arange(n) + 0.5) * h[k] for k, n in enumerate(res)], indexing="ij")
    # coordinates relative to the cell center, in units of the cell length
    rel = [(c - 0.5 * lengths[k]) / lengths[k] for k, c in enumerate(centers)]
    if inclusion_shape == "none" or f == 0.0:
        inside = np.zeros(res, dtype=bool)
    elif inclusion_shape == "square":
        inside = np.all([np.abs(r) < 0.5 * f for r in rel], axis=0)
    elif inclusion_shape == "disk":
        inside = sum(r ** 2 for r in rel) < (0.5 * f) ** 2
    elif inclusion_shape == "channel":
        if kind != "meso":
            raise GeometryError("channel inclusions are meso-cell geometries")
        others = [r for k, r in enumerate(rel) if k != channel_axis]
        inside = np.all([np.abs(r) < 0.5 * f for r in others], axis=0) if others else np.ones(res, bool)
    else:  # cross
        if kind != "meso":
            raise GeometryError("cross inclusions are meso-cell geometries")
        bands = []
        for ax in range(dim):
            others = [r for k, r in enumerate(rel) if k != ax]
            bands.append(np.all([np.abs(r) < 0.5 * f for r in others], axis=0))
        inside = np.any(bands, axis=0)

    if kind == "micro" and inside.any():
        for ax in range(dim):
            if np.take(inside, 0, axis=ax).any() or np.take(inside, -1, axis=ax).any():
                raise InvalidFraction("mitochondrial inclusion touches the micro cell boundary")
    labels = np.where(inside, int(inc), int(host)).astype(np.int8)
    return UnitCellGeometry(kind, tuple(lengths), labels)


# ---------------------------------------------------------------------------
# text serialization

def dumps_cell(cell):
    res = cell.resolution
    header = " ".join([str(cell.dim), "x".join(str(r) for r in res)]
                      + [f"{x:.17g}" for x in cell.cell_lengths])
    chars = np.vectorize(lambda t: TAG_CHARS[Tag(int(t))])(cell.labels)
    if cell.dim == 1:
        body = ["".join(chars)]
    elif cell.dim == 2:
        body = ["".join(row) for row in chars]
    else:
        body = []
        for k, slab in enumerate(chars):
            if k:
                body.append("")
            body.extend("".join(row) for row in slab)
    return "\n".join([header] + body) + "\n"


def loads_cell(text):
    """Parse the cell text format: header ``dim resolution lengths...`` then tag rows.

    ``resolution`` is one integer (same on every axis) or ``n1xn2[xn3]``.
    Rows are row-major (last axis fastest); 3D slabs are separated by blank
    lines.  Tag characters: ``I``/``E`` for meso cells, ``C``/``M`` for micro
    cells.
    """
    lines = text.splitlines()
    if not lines:
        raise GeometryError("empty cell file")
    head = lines[0].split()
    dim = int(head[0])
    res = tuple(int(r) for r in head[1].split("x"))
    if len(res) == 1:
        res = res * dim
    lengths = tuple(float(x) for x in head[2:2 + dim]) if len(head) > 2 else (1.0,) * dim
    if len(lengths) == 1:
        lengths = lengths * dim
    chars = "".join(ln.strip() for ln in lines[1:])
    if len(chars) != int(np.prod(res)):
        raise GeometryError(f"expected {int(np.prod(res))} tag characters, found {len(chars)}")
    try:
        tags = np.array([int(CHAR_TAGS[c]) for c in chars], dtype=np.int8).reshape(res)
    except KeyError as exc:
        raise GeometryError(f"unknown tag character {exc.args[0]!r}") from None
    kinds = {"meso" if t in (Tag.EXTRA, Tag.INTRA) else "micro" for t in np.unique(tags)}
    if len(kinds) != 1:
        raise GeometryError("a cell mixes meso and micro tags")
    return UnitCellGeometry(kinds.pop(), lengths, tags)


def save_cell(cell, path):
    Path(path).write_text(dumps_cell(cell))


def load_cell(path):
    return loads_cell(Path(path).read_text())


# ---------------------------------------------------------------------------
# tiling

def _as_integer(x, what):
    k = int(round(x))
    if k < 1 or abs(x - k) > 1e-9 * max(1.0, abs(x)):
        raise GeometryError(f"{what} must be a positive integer, got {x}")
    return k


@dataclass(frozen=True)
class TiledDomainSpec:
    """Scales and reference cells of the perforated macroscopic domain.

    ``epsilon`` is the meso period relative to the macroscopic lengths and
    ``delta`` the micro period relative to the meso cell, so a micro cell
    has physical size ``epsilon * delta * micro_cell.cell_lengths`` and every
    meso cell holds ``1/delta`` micro cells per axis (for equal reference
    lengths).  ``cell_resolution`` (voxels per meso cell and axis) defaults to
    the smallest grid on which both cells are represented exactly.
    """

    macro_lengths: tuple
    epsilon: float
    delta: float
    meso_cell: UnitCellGeometry
    micro_cell: UnitCellGeometry
    cell_resolution: tuple | None = None

    def __post_init__(self):
        d = self.meso_cell.dim
        if self.micro_cell.dim != d:
            raise GeometryError("meso and micro cells must have the same dimension")
        if self.meso_cell.kind != "meso" or self.micro_cell.kind != "micro":
            raise GeometryError("expected a meso cell and a micro cell")
        lengths = tuple(float(x) for x in np.broadcast_to(self.macro_lengths, (d,)))
        object.__setattr__(self, "macro_lengths", lengths)
        if not self.epsilon > 0 or not self.delta > 0:
            raise GeometryError("epsilon and delta must be positive")
        if self.delta > self.epsilon * (1 + 1e-12):
            raise GeometryError("delta must not exceed epsilon")
        cells = self.cells_per_axis
        micro = self.micro_per_cell
        if self.cell_resolution is None:
            res = tuple(math.lcm(self.meso_cell.resolution[k], micro[k] * self.micro_cell.resolution[k])
                        for k in range(d))
        else:
            res = tuple(int(r) for r in np.broadcast_to(self.cell_resolution, (d,)))
        object.__setattr__(self, "cell_resolution", res)
        for k in range(d):
            if res[k] % self.meso_cell.resolution[k]:
                raise IncommensurateResolution(
                    f"cell resolution {res[k]} is not a multiple of the meso resolution")
            if res[k] % micro[k] or (res[k] // micro[k]) % self.micro_cell.resolution[k]:
                raise IncommensurateResolution(
                    f"cell resolution {res[k]} does not hold {micro[k]} micro cells "
                    f"of resolution {self.micro_cell.resolution[k]}")
        del cells

    @property
    def dim(self):
        return self.meso_cell.dim

    @property
    def cells_per_axis(self):
        return tuple(_as_integer(self.macro_lengths[k] / (self.epsilon * self.meso_cell.cell_lengths[k]),
                                 "number of meso cells per axis")
                     for k in range(self.dim))

    @property
    def micro_per_cell(self):
        return tuple(_as_integer(self.meso_cell.cell_lengths[k] / (self.delta * self.micro_cell.cell_lengths[k]),
                                 "number of micro cells per meso cell")
                     for k in range(self.dim))

    @property
    def micro_resolution(self):
        """Voxels per micro cell and axis on the tiled grid."""
        return tuple(r // m for r, m in zip(self.cell_resolution, self.micro_per_cell))

    @property
    def grid_shape(self):
        return tuple(n * r for n, r in zip(self.cells_per_axis, self.cell_resolution))

    @property
    def spacing(self):
        return np.array([self.epsilon * self.meso_cell.cell_lengths[k] / self.cell_resolution[k]
                         for k in range(self.dim)])

    def with_scales(self, epsilon, delta, cell_resolution=None):
        return TiledDomainSpec(self.macro_lengths, epsilon, delta, self.meso_cell, self.micro_cell,
                               cell_resolution)


def _upsample(a, factors):
    for ax, f in enumerate(factors):
        if f != 1:
            a = np.repeat(a, f, axis=ax)
    return a


@dataclass(frozen=True)
class TiledDomain:
    """Per-voxel tags of the perforated domain plus the local cell pictures used to build it."""

    spec: TiledDomainSpec
    labels: np.ndarray = field(repr=False)
    local_meso: np.ndarray = field(repr=False)
    local_micro: np.ndarray = field(repr=False)

    @property
    def shape(self):
        return self.labels.shape

    @property
    def spacing(self):
        return self.spec.spacing

    @property
    def voxel_volume(self):
        return float(np.prod(self.spacing))

    def mask(self, tag):
        return self.labels == int(tag)

    def volume_fraction(self, tag):
        return float(self.mask(tag).mean())

    def voxel_centers(self):
        h = self.spacing
        grids = np.meshgrid(*[(np.arange(n) + 0.5) * h[k] for k, n in enumerate(self.shape)], indexing="ij")
        return np.stack(grids, axis=-1)

    @cached_property
    def meso_labels(self):
        """Meso-level tags (INTRA / EXTRA) over the whole grid, holes counted as INTRA."""
        return np.where(self.labels == TiledTag.EXTRA, int(Tag.EXTRA), int(Tag.INTRA)).astype(np.int8)

    @cached_property
    def membrane_facets(self):
        """Faces of Gamma_eps: intracellular cytoplasm against extracellular voxels."""
        return find_facets(self.labels, self.spacing, TiledTag.INTRA_CYTO, TiledTag.EXTRA, periodic=False)

    @cached_property
    def meso_facets(self):
        """Meso-level interface faces (INTRA, holes included, against EXTRA)."""
        return find_facets(self.meso_labels, self.spacing, Tag.INTRA, Tag.EXTRA, periodic=False)

    @cached_property
    def hole_facets(self):
        """Faces of Gamma_delta: cytoplasm against mitochondria."""
        return find_facets(self.labels, self.spacing, TiledTag.INTRA_CYTO, TiledTag.INTRA_MITO, periodic=False)


def tile_microdomain(spec):
    """Tag every voxel of the domain as EXTRA, INTRA_CYTO or INTRA_MITO."""
    d = spec.dim
    res = spec.cell_resolution
    micro = spec.micro_per_cell
    meso_up = _upsample(spec.meso_cell.labels, [res[k] // spec.meso_cell.resolution[k] for k in range(d)])
    zres = spec.micro_resolution
    micro_up = _upsample(spec.micro_cell.labels, [zres[k] // spec.micro_cell.resolution[k] for k in range(d)])
    local_micro = np.tile(micro_up, micro)
    meso_grid = np.tile(meso_up, spec.cells_per_axis)
    micro_grid = np.tile(local_micro, spec.cells_per_axis)
    labels = np.full(spec.grid_shape, int(TiledTag.EXTRA), dtype=np.int8)
    intra = meso_grid == Tag.INTRA
    labels[intra & (micro_grid == Tag.CYTO)] = TiledTag.INTRA_CYTO
    labels[intra & (micro_grid == Tag.MITO)] = TiledTag.INTRA_MITO
    labels.setflags(write=False)
    return TiledDomain(spec, labels, meso_up, micro_up)


def lower_channel(meso, channel_width):
    """Roll a centered channel cell (channel along axis 0) so the channel starts at ``y_2 = 0``."""
    if meso.dim == 1:
        return meso
    shift = [0] * meso.dim
    shift[1] = -int(round(0.5 * (1.0 - channel_width) * meso.resolution[1]))
    return meso.roll(shift)


def canonical_cells(meso_resolution=16, micro_resolution=4, channel_width=0.5, hole_fraction=0.5, dim=2):
    """Reference geometry of the convergence experiments.

    Meso cell: an intracellular channel of width ``channel_width`` along
    axis 0, shifted so that it occupies the lower part of the cell and its
    walls fall on micro-cell boundaries for every ``delta = 1/2**k``.
    Micro cell: a centered square mitochondrion of side ``hole_fraction``.
    """
    meso = lower_channel(build_standard_cell("meso", "channel", channel_width, meso_resolution, dim=dim),
                         channel_width)
    micro = build_standard_cell("micro", "square", hole_fraction, micro_resolution, dim=dim)
    return meso, micro
