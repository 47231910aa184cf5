import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bidomain_hom.errors import ResolutionMismatch
from bidomain_hom.geometry import Tag, TiledDomainSpec, build_standard_cell, canonical_cells, tile_microdomain
from bidomain_hom.unfolding import (
    boundary_map,
    broken_gradient,
    check_identities,
    fold,
    fold_boundary,
    two_scale_error,
    unfold,
    unfold_boundary,
    unfold_delta,
    unfold_micro,
)


@pytest.fixture(scope="module")
def spec():
    meso, micro = canonical_cells(meso_resolution=8, micro_resolution=4)
    # 4-cell tiling, two micro cells per meso cell and axis
    return TiledDomainSpec((1.0, 1.0), 0.5, 0.25, meso, micro)


def test_constant_field(spec):
    u = unfold(np.full(spec.grid_shape, 3.5), spec)
    assert np.all(u.values == 3.5)
    assert np.all(unfold_micro(np.full(spec.grid_shape, 3.5), spec).values == 3.5)


def test_periodic_field_independent_of_cell(spec):
    rng = np.random.default_rng(1)
    Phi = rng.standard_normal(spec.cell_resolution)
    u = unfold(np.tile(Phi, spec.cells_per_axis), spec)
    assert np.all(u.values == Phi.ravel()[None, :])


def test_micro_periodic_field(spec):
    rng = np.random.default_rng(2)
    Theta = rng.standard_normal(spec.micro_resolution)
    reps = [c * m for c, m in zip(spec.cells_per_axis, spec.micro_per_cell)]
    u = unfold_micro(np.tile(Theta, reps), spec)
    assert np.all(u.cells_view() == Theta)


def test_affine_field(spec):
    # x_1 at voxel centers written as eps * (k l + y): the unfolding returns the same numbers
    R = spec.cell_resolution[0]
    eps = spec.epsilon
    i = np.arange(spec.grid_shape[0])
    k, j = i // R, i % R
    x1 = eps * (k * 1.0 + (j + 0.5) / R)
    u = unfold(np.broadcast_to(x1[:, None], spec.grid_shape), spec).cells_view()
    kk = np.arange(spec.cells_per_axis[0])[:, None, None, None]
    yy = ((np.arange(R) + 0.5) / R)[None, None, :, None]
    assert np.array_equal(u, np.broadcast_to(eps * (kk * 1.0 + yy), u.shape))


def test_reconstruction_and_multiset(spec):
    rng = np.random.default_rng(3)
    u = rng.standard_normal((3,) + spec.grid_shape)
    Tu = unfold(u, spec)
    assert Tu.values.shape == (3, 4, 16 * 16)
    assert np.array_equal(fold(Tu, spec), u)
    assert np.array_equal(np.sort(Tu.values, axis=None), np.sort(u, axis=None))


def test_composition_consistency(spec):
    rng = np.random.default_rng(4)
    u = rng.standard_normal(spec.grid_shape)
    assert np.array_equal(unfold_micro(u, spec).values, unfold_delta(unfold(u, spec), spec).values)


def test_resolution_mismatch(spec):
    with pytest.raises(ResolutionMismatch):
        unfold(np.zeros((10, 10)), spec)
    with pytest.raises(ResolutionMismatch):
        unfold_boundary(np.zeros(3), spec)


def test_tag_mask(spec):
    u = unfold(np.zeros(spec.grid_shape), spec, tag=Tag.EXTRA)
    assert u.mask.mean() == pytest.approx(0.5)


def test_boundary_constant_and_periodic(spec):
    dom = tile_microdomain(spec)
    facets = dom.membrane_facets
    Tb = unfold_boundary(np.full(len(facets), 2.0), spec)
    assert np.all(Tb.values[Tb.mask] == 2.0)
    assert np.all(np.isnan(Tb.values[~Tb.mask]))
    # periodic trace: depends on the reference facet only
    bmap = boundary_map(spec)
    ref_vals = np.arange(bmap.n_reference, dtype=float)
    Tb = unfold_boundary(ref_vals[bmap.reference], spec, bmap=bmap)
    assert np.all((Tb.values == ref_vals[None, :])[Tb.mask])
    assert np.array_equal(fold_boundary(Tb, bmap), ref_vals[bmap.reference])


def test_boundary_affine_trace(spec):
    dom = tile_microdomain(spec)
    facets = dom.membrane_facets
    bmap = boundary_map(spec)
    h = spec.spacing
    # facet-center coordinate x_2 of horizontal walls
    x2 = (facets.low[:, 1] + np.where(facets.axis == 1, 1.0, 0.5)) * h[1]
    Tb = unfold_boundary(x2, spec, bmap=bmap)
    ref = bmap.reference_facets
    # reference position measured from the intracellular voxel (the wrapped wall sits at y_2 = 0)
    intra = np.where((ref.normal > 0)[:, None], ref.low, ref.high(spec.cell_resolution))
    offset = np.where(ref.axis == 1, np.where(ref.normal > 0, 1.0, 0.0), 0.5)
    y2 = (intra[:, 1] + offset) * (h[1] / spec.epsilon)
    k2 = np.unravel_index(np.arange(bmap.n_cells), spec.cells_per_axis)[1]
    expected = spec.epsilon * (k2[:, None] + y2[None, :])
    assert np.allclose(Tb.values[Tb.mask], expected[Tb.mask], atol=1e-15)


def test_outer_boundary_facets_masked(spec):
    Tb = unfold_boundary(np.zeros(len(tile_microdomain(spec).membrane_facets)), spec)
    # the lower channel wall of the bottom row of cells lies on the outer boundary
    assert (~Tb.mask).sum() == spec.cells_per_axis[0] * spec.cell_resolution[0]


def test_identities_unit_fields(spec):
    one = np.ones(spec.grid_shape)
    rep = check_identities(one, one, spec)
    assert all(abs(r) <= 1e-12 for r in rep.values())
    assert rep["product"] == 0.0 and rep["gradient"] == 0.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_identities_random_fields(seed):
    meso, micro = canonical_cells(meso_resolution=8, micro_resolution=4)
    spec = TiledDomainSpec((1.0, 1.0), 0.5, 0.25, meso, micro)
    rng = np.random.default_rng(seed)
    u, v = rng.standard_normal((2,) + spec.grid_shape)
    rep = check_identities(u, v, spec)
    for name, r in rep.items():
        assert r <= 1e-12, name


def test_gradient_of_sine(spec):
    x1 = spec.spacing[0] * (np.arange(spec.grid_shape[0]) + 0.5)
    u = np.broadcast_to(np.sin(2 * np.pi * x1)[:, None], spec.grid_shape).copy()
    rep = check_identities(u, u, spec)
    assert rep["gradient"] <= 1e-12
    assert rep["gradient_micro"] <= 1e-12


def test_broken_gradient_wraps_inside_blocks():
    u = np.arange(8.0)
    g = broken_gradient(u, (4,), (1.0,))[..., 0]
    assert np.array_equal(g, [1, 1, 1, -3, 1, 1, 1, -3])


@settings(max_examples=20, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
def test_linearity(a, b, seed):
    meso, micro = canonical_cells(meso_resolution=8, micro_resolution=4)
    spec = TiledDomainSpec((1.0, 1.0), 0.5, 0.5, meso, micro)
    rng = np.random.default_rng(seed)
    u, v = rng.standard_normal((2,) + spec.grid_shape)
    lhs = unfold(a * u + b * v, spec).values
    rhs = a * unfold(u, spec).values + b * unfold(v, spec).values
    assert np.array_equal(lhs, rhs)


def test_two_scale_smoke():
    meso, micro = canonical_cells(meso_resolution=8, micro_resolution=4)
    base = TiledDomainSpec((1.0, 1.0), 0.5, 0.5, meso, micro)
    x = (np.arange(32) + 0.5) / 32
    X = np.stack(np.meshgrid(x, x, indexing="ij"), -1).reshape(-1, 2)

    def g(p):
        return np.sin(2 * np.pi * p[..., 0]) + p[..., 1]

    def Phi(y):
        return np.cos(2 * np.pi * y[..., 1])

    errs = [two_scale_error(base.with_scales(e, e), g, Phi, X) for e in (0.5, 0.25, 0.125)]
    assert errs[0] > errs[1] > errs[2]


def test_one_dimensional_tiling():
    meso = build_standard_cell("meso", "channel", 0.5, 8, dim=1)
    micro = build_standard_cell("micro", "none", 0.0, 4, dim=1)
    spec = TiledDomainSpec(1.0, 0.25, 0.25, meso, micro)
    u = np.random.default_rng(0).standard_normal(spec.grid_shape)
    assert np.array_equal(fold(unfold(u, spec), spec), u)
