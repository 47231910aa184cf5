import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from bidomain_hom.cell_solver import TensorField
from bidomain_hom.errors import NoInterface
from bidomain_hom.geometry import Tag, TiledDomainSpec, UnitCellGeometry, canonical_cells
from bidomain_hom.ionic import FhnParams, h_gate, i_ion
from bidomain_hom.macro_solver import Stimulus
from bidomain_hom.micro_solver import (
    MICRO_DIAGNOSTIC_COLUMNS,
    NORM_NAMES,
    DnsSolver,
    MicroState,
    convergence_study,
    micro_step,
    relative_l2,
    run,
)

P = FhnParams()
MESO, MICRO = canonical_cells()
SPEC = TiledDomainSpec((1.0, 1.0), 0.5, 0.5, MESO, MICRO)
STIM = Stimulus((0.0,), 0.25, 2.0, 0.0, 0.5)


@pytest.fixture(scope="module")
def solver():
    return DnsSolver(SPEC, params=P, dt=1e-2, i_app=STIM)


def test_zero_data_stays_zero():
    s, (state, diag, _, norms) = run(SPEC, params=P, dt=1e-2, T=0.2, record=False)
    assert np.all(state.v == 0) and np.all(state.u_i == 0) and np.all(state.u_e == 0)
    assert np.all(diag[:, 1:] == 0)
    assert all(norms[k] == 0 for k in NORM_NAMES)


def test_empty_membrane_is_rejected():
    meso = UnitCellGeometry("meso", (1.0, 1.0), np.full((4, 4), int(Tag.INTRA)))
    spec = TiledDomainSpec((1.0, 1.0), 0.5, 0.5, meso, MICRO)
    with pytest.raises(NoInterface):
        DnsSolver(spec)


def test_uniform_state_matches_ode():
    s = DnsSolver(SPEC, params=P, dt=1e-3)
    state = s.initial_state(0.3, 0.0)
    for _ in range(500):
        state = s.step(state)
    ref = solve_ivp(lambda t, y: [-i_ion(y[0], y[1], P), h_gate(y[0], y[1], P)], (0.0, 0.5), [0.3, 0.0],
                    method="DOP853", rtol=1e-12, atol=1e-14).y[:, -1]
    v_avg = s.membrane_mass @ state.v / s.membrane_mass.sum()
    w_avg = s.membrane_mass @ state.w / s.membrane_mass.sum()
    assert abs(v_avg - ref[0]) <= 1e-3 and abs(w_avg - ref[1]) <= 1e-3
    assert np.abs(state.v - ref[0]).max() <= 1e-3


def test_membrane_geometry(solver):
    # lumped facet mass adds up to the membrane area; every facet vertex is in both meshes
    assert solver.membrane_mass.sum() == pytest.approx(solver.facets.area.sum(), rel=1e-14)
    assert solver.Pi.sum() == solver.n_membrane and solver.Pe.sum() == solver.n_membrane


def test_invariants_every_step(solver):
    state = solver.initial_state(lambda x: 0.2 * x[:, 0], 0.0)
    for _ in range(20):
        state = solver.step(state)
        assert np.allclose(state.v, solver.Pi @ state.u_i - solver.Pe @ state.u_e, atol=1e-14)
        assert abs(solver.mass_e @ state.u_e) <= 1e-12
        assert state.diagnostics["int_ue"] == pytest.approx(0.0, abs=1e-12)


def test_operator_symmetric_with_constant_kernel(solver):
    A = solver.A
    assert abs(A - A.T).max() == 0.0
    assert np.abs(A @ np.ones(A.shape[0])).max() < 1e-10


def test_flux_balance(solver):
    state = solver.initial_state(lambda x: np.sin(3 * x[:, 0]) * np.cos(2 * x[:, 1]), 0.0)
    state = solver.step(state)
    assert solver.flux_balance(state) < 1e-9


def test_initial_potentials_satisfy_constraint(solver):
    state = solver.initial_state(lambda x: x[:, 0] ** 2, 0.1)
    assert np.allclose(state.v, solver.membrane_coords[:, 0] ** 2, atol=1e-12)
    assert np.all(state.w == 0.1)


@settings(max_examples=8, deadline=None)
@given(st.floats(-5, 5))
def test_gauge_invariance(k):
    s = _cached_solver()
    state = s.initial_state(lambda x: 0.3 * x[:, 1], 0.0)
    shifted = MicroState(state.t, state.u_i + k, state.u_e + k, state.v, state.w)
    a, b = s.step(state), s.step(shifted)
    assert np.allclose(a.u_e, b.u_e, atol=1e-12) and np.allclose(a.v, b.v, atol=1e-12)


_CACHE = {}


def _cached_solver():
    if "s" not in _CACHE:
        _CACHE["s"] = DnsSolver(SPEC, params=P, dt=1e-2, i_app=STIM)
    return _CACHE["s"]


def test_micro_step_function_matches_solver(solver):
    s0 = solver.initial_state(0.2, 0.0)
    a = micro_step(s0, 1e-2, SPEC, None, None, P, STIM)
    assert np.array_equal(a.v, solver.step(s0).v)


def test_cell_dependent_tensors_are_tiled():
    # a laminate intracellular tensor on Z and a constant one must differ, a uniform field must not
    lam = TensorField.laminate(MICRO, 1.0, 4.0, axis=0)
    const = TensorField.constant(MICRO, 2.0)
    s_lam = DnsSolver(SPEC, M_i=lam, dt=1e-2)
    s_const = DnsSolver(SPEC, M_i=const, dt=1e-2)
    s_mat = DnsSolver(SPEC, M_i=2.0 * np.eye(2), dt=1e-2)
    assert abs(s_const.Ki - s_mat.Ki).max() < 1e-13
    assert abs(s_lam.Ki - s_const.Ki).max() > 0.1


def test_delta_independence_without_holes():
    micro = UnitCellGeometry("micro", (1.0, 1.0), np.full((4, 4), int(Tag.CYTO)))
    outs = []
    for delta in (0.5, 0.25):
        spec = TiledDomainSpec((1.0, 1.0), 0.5, delta, MESO, micro, cell_resolution=16)
        s, (state, diag, _, _) = run(spec, params=P, dt=1e-2, T=0.3, i_app=STIM, record=False)
        outs.append((state, diag))
    (a, da), (b, db) = outs
    assert np.array_equal(a.u_i, b.u_i) and np.array_equal(a.u_e, b.u_e)
    assert np.array_equal(a.v, b.v) and np.array_equal(da, db)


def test_run_outputs(solver):
    state = solver.initial_state(0.0, 0.0)
    final, diag, hist, norms = solver.run(state, 10, record_every=5)
    assert diag.shape == (11, len(MICRO_DIAGNOSTIC_COLUMNS))
    assert hist["v"].shape == (3, solver.n_membrane)
    assert hist["ue_vox"].shape == (3,) + SPEC.grid_shape
    assert set(norms) == set(NORM_NAMES) and all(np.isfinite(list(norms.values())))


def test_relative_l2():
    assert relative_l2(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert relative_l2(np.array([3.0, 4.0]), np.array([3.0, 2.0])) == pytest.approx(2.0 / np.sqrt(13.0))
    # a vanishing reference gives the error relative to the floor
    assert relative_l2(np.full(4, 1e-13), np.zeros(4)) == pytest.approx(0.1)


def test_uniform_study_errors_at_solver_level():
    # both models follow the same ODE and keep u_e at zero, so only rounding separates them
    res = convergence_study(MESO, MICRO, eps_list=(0.5, 0.25), dt=1e-2, T=0.3, stimulus=None, v0=0.3,
                            macro_resolution=16, keep_histories=True)
    for _, err_ue, err_v in res.rows:
        assert err_v < 1e-10
    for h in res.histories.values():
        assert np.abs(h["ue_cells"]).max() < 1e-12


def test_short_study_decreases():
    res = convergence_study(MESO, MICRO, eps_list=(0.5, 0.25), dt=1e-2, T=1.0, stimulus=STIM)
    assert res.monotone()
    assert res.tensors["mu_m"] == 2.0
