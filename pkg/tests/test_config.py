import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bidomain_hom.config import DEFAULTS, STAGES, load_config, loads_config
from bidomain_hom.errors import ParseError, ValidationError


def key_of(text):
    with pytest.raises(ValidationError) as err:
        loads_config(text)
    return err.value.key


def test_minimal_file_fills_defaults(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("seed = 3\n")
    cfg = load_config(path)
    assert cfg.seed == 3
    assert cfg.stages == STAGES
    assert cfg["time"] == DEFAULTS["time"]
    assert cfg.params().a == 0.7 and cfg.params().theta == 0.25
    spec = cfg.spec()
    assert spec.epsilon == 0.5 and spec.delta == 0.5 and spec.grid_shape == (32, 32)


def test_delta_above_epsilon_is_rejected():
    assert key_of("[scales]\nepsilon = 0.25\ndelta = 0.5\n") == "scales.delta"


@pytest.mark.parametrize("text,key", [
    ("bogus = 1\n", "bogus"),
    ("[scales]\nfoo = 1\n", "scales.foo"),
    ("[time]\ndt = 'fast'\n", "time.dt"),
    ("[time]\ndt = 0.03\nT = 1.0\n", "time.T"),
    ("[ionic]\nlam = 1.0\n", "ionic"),
    ("[ionic]\nbox = [1.0, -1.0]\n", "ionic.box"),
    ("stages = ['homogenize', 'plot']\n", "stages"),
    ("[geometry]\nmeso_shape = 'star'\n", "geometry.meso_shape"),
    ("[tensors]\nM_i = -1.0\n", "tensors.M_i"),
    ("[tensors]\nM_e = [[1.0, 0.0]]\n", "tensors.M_e"),
    ("[tensors]\nM_i = {laminate = {m1 = 1.0}}\n", "tensors.M_i.laminate.m2"),
    ("[tensors]\nM_i = {laminate = {m1 = 1.0, m2 = 2.0, angle = 3}}\n", "tensors.M_i.laminate.angle"),
    ("[initial]\nv0 = '__import__(\"os\")'\n", "initial.v0"),
    ("[initial]\nv0 = 'x[0] +'\n", "initial.v0"),
    ("[macro]\nMi = 0.3\n", "macro.Me"),
    ("[scales]\nmacro_lengths = [1.0, 1.0, 1.0]\n", "scales.macro_lengths"),
    ("[scales]\neps_list = [0.3]\n", "scales.eps_list"),
    ("[solver]\nrtol = 2.0\n", "solver.rtol"),
])
def test_bad_values_name_their_key(text, key):
    assert key_of(text) == key


def test_parse_error(tmp_path):
    with pytest.raises(ParseError):
        loads_config("[scales\n")
    with pytest.raises(ParseError):
        load_config(tmp_path / "missing.toml")


def test_laminate_tensor_has_two_bands():
    cfg = loads_config("[tensors]\nM_i = {laminate = {m1 = 1.0, m2 = 4.0, axis = 0}}\n")
    field, _ = cfg.tensor_fields()
    micro = cfg.cells()[1]
    centers = micro.voxel_centers()
    vals = field.values
    rng = np.random.default_rng(0)
    for band, expected in (((0.0, 0.5), 1.0), ((0.5, 1.0), 4.0)):
        pts = np.column_stack([rng.uniform(*band, 4), rng.uniform(0, 1, 4)])
        for p in pts:
            idx = tuple(np.minimum((p * micro.resolution).astype(int), np.array(micro.resolution) - 1))
            assert centers[idx][0] < 0.5 if expected == 1.0 else centers[idx][0] > 0.5
            assert np.array_equal(vals[idx], expected * np.eye(2))


def test_matrix_and_scalar_tensors():
    cfg = loads_config("[tensors]\nM_i = [[2.0, 0.5], [0.5, 1.0]]\nM_e = 3\n")
    Mi, Me = cfg.tensor_fields()
    assert np.array_equal(Mi.values[0, 0], [[2.0, 0.5], [0.5, 1.0]])
    assert np.array_equal(Me.values[1, 2], 3.0 * np.eye(2))


def test_initial_expression():
    cfg = loads_config("[initial]\nv0 = '0.5 * x[0] + sin(pi * x[1])'\nw0 = 0.1\n")
    v0, w0 = cfg.initial()
    pts = np.array([[1.0, 0.5], [0.2, 0.0]])
    assert np.allclose(v0(pts), [1.5, 0.1])
    assert w0 == 0.1


def test_stimulus_and_switch():
    cfg = loads_config("[stimulus]\ncenter = [0.5, 0.5]\nradius = 0.1\n")
    s = cfg.stimulus()
    assert s.center == (0.5, 0.5) and s(0.0, np.array([[0.5, 0.55]]))[0] == 2.0
    assert loads_config("[stimulus]\nenabled = false\n").stimulus() is None


def test_cell_files(tmp_path):
    from bidomain_hom.geometry import build_standard_cell, save_cell

    save_cell(build_standard_cell("meso", "square", 0.5, 8), tmp_path / "meso.txt")
    (tmp_path / "c.toml").write_text("[geometry]\nmeso_file = 'meso.txt'\n")
    cfg = load_config(tmp_path / "c.toml")
    meso, micro = cfg.cells()
    assert meso.resolution == (8, 8) and micro.resolution == (4, 4)


def test_single_macro_length_broadcasts():
    cfg = loads_config("[scales]\nmacro_lengths = [2.0]\n")
    assert cfg["scales"]["macro_lengths"] == [2.0, 2.0]


@settings(max_examples=25, deadline=None)
@given(st.sampled_from([0.5, 0.25, 0.125]), st.sampled_from([0.5, 0.25, 0.125]))
def test_delta_rule(eps, delta):
    text = f"[scales]\nepsilon = {eps}\ndelta = {delta}\n"
    if delta > eps:
        assert key_of(text) == "scales.delta"
    else:
        spec = loads_config(text).spec()
        assert spec.delta <= spec.epsilon
