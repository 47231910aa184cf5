import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bidomain_hom.errors import (
    DisconnectedRegion,
    GeometryError,
    IncommensurateResolution,
    InvalidFraction,
)
from bidomain_hom.geometry import (
    Tag,
    TiledDomainSpec,
    TiledTag,
    UnitCellGeometry,
    build_standard_cell,
    canonical_cells,
    dumps_cell,
    loads_cell,
    measure_interface,
    membrane_ratio,
    periodic_components,
    region_percolates,
    tile_microdomain,
)


def test_square_hole_measures():
    cell = build_standard_cell("micro", "square", 0.5, 16)
    m = measure_interface(cell)
    assert m.inclusion_volume == pytest.approx(0.25)
    assert m.host_volume == pytest.approx(0.75)
    # four sides of length 0.5
    assert m.interface_area == pytest.approx(2.0)


def test_channel_membrane_ratio():
    meso, _ = canonical_cells(meso_resolution=16)
    assert meso.fraction(Tag.INTRA) == pytest.approx(0.5)
    # two straight walls of unit length in a unit cell
    assert membrane_ratio(meso) == pytest.approx(2.0)
    assert meso.percolates(Tag.INTRA, 0) and meso.percolates(Tag.EXTRA, 0)
    assert not meso.percolates(Tag.INTRA, 1)


def test_canonical_channel_is_aligned_to_lower_half():
    meso, _ = canonical_cells(meso_resolution=16)
    intra = meso.mask(Tag.INTRA)
    assert intra[:, :8].all() and not intra[:, 8:].any()


def test_disconnected_region_rejected():
    labels = np.zeros((8, 8), dtype=np.int8)
    labels[1:3, 1:3] = Tag.INTRA
    labels[5:7, 5:7] = Tag.INTRA
    with pytest.raises(DisconnectedRegion):
        UnitCellGeometry("meso", 1.0, labels)


def test_periodic_wrap_joins_components():
    mask = np.zeros((6, 6), dtype=bool)
    mask[:, 0] = True
    mask[:, 5] = True
    assert periodic_components(mask) == 1
    assert region_percolates(mask, 0)
    assert not region_percolates(mask, 1)


def test_invalid_fraction():
    with pytest.raises(InvalidFraction):
        build_standard_cell("micro", "square", 1.2, 8)
    with pytest.raises(InvalidFraction):
        build_standard_cell("micro", "square", 0.99, 8)


def test_micro_channel_rejected():
    with pytest.raises(GeometryError):
        build_standard_cell("micro", "channel", 0.5, 8)


@pytest.mark.parametrize("dim", [1, 2, 3])
def test_text_roundtrip(dim):
    shape = "square" if dim > 1 else "none"
    cell = build_standard_cell("micro", shape, 0.5, 4, dim=dim, cell_lengths=2.0)
    assert loads_cell(dumps_cell(cell)) == cell


def test_text_format_rejects_bad_characters():
    with pytest.raises(GeometryError):
        loads_cell("2 2\nIX\nII\n")


def test_tiling_counts():
    meso, micro = canonical_cells(meso_resolution=8, micro_resolution=4)
    spec = TiledDomainSpec((1.0, 1.0), 0.25, 0.25, meso, micro)
    dom = tile_microdomain(spec)
    assert spec.cells_per_axis == (4, 4)
    assert spec.micro_per_cell == (4, 4)
    assert dom.shape == spec.grid_shape == (64, 64)
    assert dom.volume_fraction(TiledTag.EXTRA) == pytest.approx(0.5)
    # every intracellular voxel is cytoplasm or mitochondrion in ratio 3:1
    assert dom.volume_fraction(TiledTag.INTRA_MITO) == pytest.approx(0.5 * 0.25)


def test_delta_larger_than_epsilon_rejected():
    meso, micro = canonical_cells(meso_resolution=8, micro_resolution=4)
    with pytest.raises(GeometryError):
        TiledDomainSpec((1.0, 1.0), 0.25, 0.5, meso, micro)


def test_incommensurate_resolution():
    meso, micro = canonical_cells(meso_resolution=8, micro_resolution=4)
    with pytest.raises(IncommensurateResolution):
        TiledDomainSpec((1.0, 1.0), 0.5, 0.25, meso, micro, cell_resolution=12)


def test_membrane_facets_area_matches_ratio():
    meso, micro = canonical_cells(meso_resolution=8, micro_resolution=4)
    spec = TiledDomainSpec((1.0, 1.0), 0.25, 0.25, meso, micro)
    dom = tile_microdomain(spec)
    # mu_m |Omega| / eps, minus the one channel wall lying on the outer boundary
    assert dom.membrane_facets.area.sum() == pytest.approx(membrane_ratio(meso) / 0.25 - 1.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 7), st.integers(0, 7))
def test_roll_preserves_measures(s0, s1):
    cell = build_standard_cell("meso", "cross", 0.5, 8)
    rolled = cell.roll((s0, s1))
    a, b = measure_interface(cell), measure_interface(rolled)
    assert a == pytest.approx(b)
