"""Direct simulation of the microscopic bidomain system on the resolved tiling.

The intracellular potential lives on the d-linear mesh of the cytoplasm
voxels and the extracellular potential on the mesh of the extracellular
voxels; mitochondria are simply absent (no-flux).  Nodes on the membrane
``Gamma_eps`` appear in both meshes.  The transmembrane potential ``v`` and
the gating variable ``w`` are kept at the membrane nodes, with the facet
mass lumped onto them, so that ``v = P_i u_i - P_e u_e`` where ``P_i`` and
``P_e`` pick the membrane nodes out of each mesh.

A step is the same Godunov splitting as on the macroscopic scale: RK4
kinetics at the membrane nodes, then an implicit Euler step of

    eps m (v - v*) / dt  coupled to  K_i u_i  and  K_e u_e,

which is the symmetric system

    [ K_i + P_i' D P_i    -P_i' D P_e       ] [u_i]   [  P_i' D v* ]
    [ -P_e' D P_i         K_e + P_e' D P_e  ] [u_e] = [ -P_e' D v* ]

with ``D = eps m / dt``.  One extracellular node is pinned and both
potentials are shifted afterwards so that ``u_e`` has zero mean on the
extracellular domain.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .cell_solver import TensorField, homogenize_extracellular, two_level_homogenize
from .errors import LinearSolveFailure, NoInterface, StabilityBreach
from .fem import VoxelMesh
from .geometry import Tag, TiledDomainSpec, TiledTag, membrane_ratio, tile_microdomain
from .ionic import FhnParams, i1, rk4_step
from .macro_solver import MacroGrid, MacroSolver
from .unfolding import boundary_map, unfold, unfold_boundary

MICRO_DIAGNOSTIC_COLUMNS = ("t", "norm_v", "norm_w", "int_ue", "min_v", "max_v")
NORM_NAMES = ("v_linf_l2", "w_linf_l2", "ui_l2h1", "ue_l2h1", "v_lr", "i1_lr", "dtv_l2")


@dataclass
class MicroState:
    """``u_i`` on the cytoplasm mesh, ``u_e`` on the extracellular mesh, ``v`` and ``w`` on membrane nodes."""

    t: float
    u_i: np.ndarray
    u_e: np.ndarray
    v: np.ndarray
    w: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def copy(self):
        return MicroState(self.t, self.u_i.copy(), self.u_e.copy(), self.v.copy(), self.w.copy(),
                          dict(self.diagnostics))


def _tiled_tensor(tensor, cell, up_labels_shape, reps, dim):
    """Per-voxel tensors on the tiled grid from a cell field (or a constant)."""
    if tensor is None:
        tensor = 1.0
    if isinstance(tensor, TensorField):
        vals = tensor.values
        factors = [up_labels_shape[k] // cell.resolution[k] for k in range(dim)]
        for ax, f in enumerate(factors):
            vals = np.repeat(vals, f, axis=ax)
        return np.tile(vals, tuple(reps) + (1, 1))
    m = np.asarray(getattr(tensor, "matrix", tensor), dtype=float)
    if m.ndim == 0:
        m = m * np.eye(dim)
    return m


def _facet_vertices(facets, node_shape):
    """Flat node-grid indices of the 2**(d-1) vertices of every facet, shape (n_facets, 2**(d-1))."""
    d = facets.low.shape[1]
    base = facets.low.copy()
    base[np.arange(len(facets)), facets.axis] += 1
    out = []
    for bits in itertools.product((0, 1), repeat=d - 1):
        off = np.zeros_like(base)
        others = np.array([[k for k in range(d) if k != a] for a in range(d)], dtype=np.int64)
        if d > 1:
            oth = others[facets.axis]                       # (n, d-1)
            for j, bit in enumerate(bits):
                off[np.arange(len(facets)), oth[:, j]] += bit
        out.append(np.ravel_multi_index(tuple((base + off).T), node_shape))
    return np.stack(out, axis=1)


class DnsSolver:
    """Resolved microscopic bidomain integrator with fixed ``dt``."""

    def __init__(self, spec, M_i=None, M_e=None, params=None, dt=1e-2, i_app=None, ceiling=10.0,
                 domain=None):
        if spec.dim != 2 and spec.dim != 1:
            raise ValueError("the direct simulation supports 1D and 2D tilings")
        if not dt > 0:
            raise ValueError("dt must be positive")
        self.spec = spec
        self.dom = domain if domain is not None else tile_microdomain(spec)
        self.params = params if params is not None else FhnParams()
        self.dt = float(dt)
        self.eps = float(spec.epsilon)
        self.i_app = i_app
        self.ceiling = float(ceiling)
        d = spec.dim
        shape = self.dom.shape
        h = tuple(spec.spacing)
        facets = self.dom.membrane_facets
        if len(facets) == 0:
            raise NoInterface("the membrane Gamma_eps is empty")
        self.facets = facets

        intra_mask = self.dom.mask(TiledTag.INTRA_CYTO)
        extra_mask = self.dom.mask(TiledTag.EXTRA)
        self.mesh_i = VoxelMesh(shape, h, intra_mask)
        self.mesh_e = VoxelMesh(shape, h, extra_mask)

        reps_micro = [c * m for c, m in zip(spec.cells_per_axis, spec.micro_per_cell)]
        Mi = _tiled_tensor(M_i, spec.micro_cell, spec.micro_resolution, reps_micro, d)
        Me = _tiled_tensor(M_e, spec.meso_cell, spec.cell_resolution, spec.cells_per_axis, d)
        Mi = Mi[intra_mask] if Mi.ndim > 2 else Mi
        Me = Me[extra_mask] if Me.ndim > 2 else Me
        self.Ki = self.mesh_i.stiffness(Mi)
        self.Ke = self.mesh_e.stiffness(Me)

        node_shape = self.mesh_i.node_shape
        verts = _facet_vertices(facets, node_shape)                 # (n_f, 2^(d-1))
        self.membrane_nodes, inv = np.unique(verts, return_inverse=True)
        self.facet_nodes = inv.reshape(verts.shape)
        nm = len(self.membrane_nodes)
        self.n_membrane = nm
        w_vert = np.repeat(facets.area[:, None] / verts.shape[1], verts.shape[1], axis=1)
        self.membrane_mass = np.bincount(self.facet_nodes.ravel(), weights=w_vert.ravel(), minlength=nm)
        pi = self.mesh_i.local_index(self.membrane_nodes)
        pe = self.mesh_e.local_index(self.membrane_nodes)
        if np.any(pi < 0) or np.any(pe < 0):
            raise LinearSolveFailure("membrane node missing from a subdomain mesh")
        self.Pi = sp.csr_matrix((np.ones(nm), (np.arange(nm), pi)), shape=(nm, self.mesh_i.n_nodes))
        self.Pe = sp.csr_matrix((np.ones(nm), (np.arange(nm), pe)), shape=(nm, self.mesh_e.n_nodes))
        coords = np.stack(np.unravel_index(self.membrane_nodes, node_shape), axis=-1) * np.array(h)
        self.membrane_coords = coords

        self.ni, self.ne = self.mesh_i.n_nodes, self.mesh_e.n_nodes
        D = sp.diags(self.eps * self.membrane_mass / self.dt)
        self._D = D
        A = sp.bmat([[self.Ki + self.Pi.T @ D @ self.Pi, -(self.Pi.T @ D @ self.Pe)],
                     [-(self.Pe.T @ D @ self.Pi), self.Ke + self.Pe.T @ D @ self.Pe]], format="csc")
        self.A = A
        self._keep = np.r_[np.arange(self.ni), self.ni + np.arange(1, self.ne)]
        self._lu = self._factor(A[self._keep][:, self._keep])
        self.mass_e = self.mesh_e.lumped_mass
        self.mass_i = self.mesh_i.lumped_mass
        self._Hi = self.mesh_i.h1_seminorm_matrix()
        self._He = self.mesh_e.h1_seminorm_matrix()

    @staticmethod
    def _factor(mat):
        try:
            return spla.splu(sp.csc_matrix(mat))
        except RuntimeError as exc:
            raise LinearSolveFailure(f"microscopic system is singular: {exc}") from None

    # -- helpers -----------------------------------------------------------
    def _gauge(self, ui, ue):
        c = self.mass_e @ ue / self.mass_e.sum()
        return ui - c, ue - c

    def transmembrane(self, ui, ue):
        return self.Pi @ ui - self.Pe @ ue

    def facet_values(self, nodal):
        """Mean of the vertex values of every membrane facet (last axis = membrane nodes)."""
        return np.asarray(nodal)[..., self.facet_nodes].mean(axis=-1)

    def _iapp(self, t):
        f = self.i_app
        if f is None:
            return np.zeros(self.n_membrane)
        if callable(f):
            return np.broadcast_to(np.asarray(f(t, self.membrane_coords), dtype=float),
                                   (self.n_membrane,)).copy()
        return np.full(self.n_membrane, float(f))

    def diagnostics(self, state):
        m = self.membrane_mass
        e = self.eps
        return {
            "t": state.t,
            "norm_v": float(np.sqrt(e * (m @ state.v ** 2))),
            "norm_w": float(np.sqrt(e * (m @ state.w ** 2))),
            "int_ue": float(self.mass_e @ state.u_e),
            "min_v": float(state.v.min()),
            "max_v": float(state.v.max()),
        }

    # -- initial data ------------------------------------------------------
    def initial_state(self, v0=0.0, w0=0.0, t0=0.0):
        """Potentials of least bulk energy with the prescribed transmembrane potential ``v0``."""
        x = self.membrane_coords
        v = np.broadcast_to(np.asarray(v0(x) if callable(v0) else v0, dtype=float), (self.n_membrane,)).copy()
        w = np.broadcast_to(np.asarray(w0(x) if callable(w0) else w0, dtype=float), (self.n_membrane,)).copy()
        ui, ue = self._constrained_potentials(v)
        state = MicroState(float(t0), ui, ue, self.transmembrane(ui, ue), w)
        state.diagnostics = self.diagnostics(state)
        return state

    def _constrained_potentials(self, v):
        ni, ne, nm = self.ni, self.ne, self.n_membrane
        if not np.any(v):
            return np.zeros(ni), np.zeros(ne)
        Z = sp.csr_matrix((nm, nm))
        K = sp.bmat([[self.Ki, None, self.Pi.T],
                     [None, self.Ke, -self.Pe.T],
                     [self.Pi, -self.Pe, Z]], format="csc")
        keep = np.r_[np.arange(ni), ni + np.arange(1, ne), ni + ne + np.arange(nm)]
        rhs = np.r_[np.zeros(ni + ne), v]
        sol = np.zeros(ni + ne + nm)
        sol[keep] = self._factor(K[keep][:, keep]).solve(rhs[keep])
        return self._gauge(sol[:ni], sol[ni:ni + ne])

    # -- time stepping -----------------------------------------------------
    def step(self, state):
        dt = self.dt
        v_star, w_new = rk4_step(state.v, state.w, dt, self.params, self._iapp(state.t))
        if not np.all(np.isfinite(v_star)) or np.abs(v_star).max() > self.ceiling:
            raise StabilityBreach(f"|v| exceeded {self.ceiling} at t={state.t + dt:.6g}")
        Dv = self._D @ v_star
        b = np.r_[self.Pi.T @ Dv, -(self.Pe.T @ Dv)]
        x = np.zeros(self.ni + self.ne)
        x[self._keep] = self._lu.solve(b[self._keep])
        res = np.linalg.norm(self.A @ x - b)
        if not np.isfinite(res) or res > 1e-8 * (np.linalg.norm(b) + 1e-300):
            raise LinearSolveFailure(f"microscopic solve residual {res:.3e}")
        ui, ue = self._gauge(x[:self.ni], x[self.ni:])
        v = self.transmembrane(ui, ue)
        if np.abs(v).max() > self.ceiling:
            raise StabilityBreach(f"|v| exceeded {self.ceiling} at t={state.t + dt:.6g}")
        new = MicroState(state.t + dt, ui, ue, v, w_new)
        new.diagnostics = self.diagnostics(new)
        return new

    def flux_balance(self, state):
        """Largest mismatch between the membrane currents seen from the two sides."""
        ji = self.Pi @ (self.Ki @ state.u_i)
        je = self.Pe @ (self.Ke @ state.u_e)
        scale = max(np.abs(ji).max(), 1e-300)
        return float(np.abs(ji + je).max() / scale)

    def run(self, state, n_steps, record_every=1, record=True):
        """March ``n_steps``; returns ``(state, diagnostics, history, norms)``.

        ``history`` holds ``t``, ``v``, ``w`` and the voxel-averaged potentials
        (``ui_vox``, ``ue_vox``, NaN outside their subdomain) every
        ``record_every`` steps; ``norms`` are the monitored eps-scaled norms.
        """
        rows = [[state.diagnostics[c] for c in MICRO_DIAGNOSTIC_COLUMNS]]
        hist = {"t": [], "v": [], "w": [], "ui_vox": [], "ue_vox": []}
        acc = _NormAccumulator(self)
        acc.start(state)

        def keep(s):
            if not record:
                return
            hist["t"].append(s.t)
            hist["v"].append(s.v.copy())
            hist["w"].append(s.w.copy())
            hist["ui_vox"].append(self.mesh_i.to_voxels(s.u_i, fill=np.nan))
            hist["ue_vox"].append(self.mesh_e.to_voxels(s.u_e, fill=np.nan))

        keep(state)
        for k in range(1, n_steps + 1):
            prev = state
            state = self.step(state)
            acc.add(prev, state)
            rows.append([state.diagnostics[c] for c in MICRO_DIAGNOSTIC_COLUMNS])
            if k % record_every == 0:
                keep(state)
        history = {k: np.array(v) for k, v in hist.items()} if record else None
        return state, np.array(rows), history, acc.result()


class _NormAccumulator:
    """Time-discrete versions of the eps-scaled a priori norms (r = 4)."""

    r = 4.0

    def __init__(self, solver):
        self.s = solver
        self.v_sup = 0.0
        self.w_sup = 0.0
        self.ui = 0.0
        self.ue = 0.0
        self.vr = 0.0
        self.i1 = 0.0
        self.dtv = 0.0

    def _h1(self, u, H, m):
        return float(u @ (H @ u) + m @ u ** 2)

    def start(self, state):
        s, e = self.s, self.s.eps
        m = s.membrane_mass
        self.v_sup = float(np.sqrt(e * (m @ state.v ** 2)))
        self.w_sup = float(np.sqrt(e * (m @ state.w ** 2)))

    def add(self, prev, new):
        s, e, dt, r = self.s, self.s.eps, self.s.dt, self.r
        m = s.membrane_mass
        self.v_sup = max(self.v_sup, float(np.sqrt(e * (m @ new.v ** 2))))
        self.w_sup = max(self.w_sup, float(np.sqrt(e * (m @ new.w ** 2))))
        self.ui += dt * self._h1(new.u_i, s._Hi, s.mass_i)
        self.ue += dt * self._h1(new.u_e, s._He, s.mass_e)
        self.vr += dt * e * float(m @ np.abs(new.v) ** r)
        self.i1 += dt * e * float(m @ np.abs(i1(new.v, s.params)) ** (r / (r - 1)))
        self.dtv += dt * e * float(m @ ((new.v - prev.v) / dt) ** 2)

    def result(self):
        r = self.r
        return {
            "v_linf_l2": self.v_sup,
            "w_linf_l2": self.w_sup,
            "ui_l2h1": float(np.sqrt(self.ui)),
            "ue_l2h1": float(np.sqrt(self.ue)),
            "v_lr": float(self.vr ** (1.0 / r)),
            "i1_lr": float(self.i1 ** ((r - 1.0) / r)),
            "dtv_l2": float(np.sqrt(self.dtv)),
        }


def micro_step(state, dt, spec, M_i, M_e, p, i_app, solver_cache=None):
    """One splitting step of the resolved system (builds the solver unless a cache dict is given)."""
    key = (id(spec), dt)
    solver = None if solver_cache is None else solver_cache.get(key)
    if solver is None:
        solver = DnsSolver(spec, M_i, M_e, p, dt, i_app)
        if solver_cache is not None:
            solver_cache[key] = solver
    return solver.step(state)


def run(spec, M_i=None, M_e=None, params=None, dt=1e-2, T=1.0, v0=0.0, w0=0.0, i_app=None,
        record_every=1, record=True):
    n_steps = int(round(T / dt))
    if abs(n_steps * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError("T must be an integer multiple of dt")
    solver = DnsSolver(spec, M_i, M_e, params, dt, i_app)
    state = solver.initial_state(v0, w0)
    return solver, solver.run(state, n_steps, record_every, record)


# ---------------------------------------------------------------------------
# comparison with the homogenized model

def cell_means_extracellular(ue_vox, spec, domain=None):
    """Average of voxel values over the extracellular part of every eps-cell, shape (..., n_cells)."""
    u = unfold(ue_vox, spec, tag=Tag.EXTRA, domain=domain)
    vals = u.values[..., u.mask]
    return vals.mean(axis=-1)


def cell_means_membrane(v_facets, spec, bmap):
    """Area-weighted mean of facet values over the covered part of ``Gamma^y`` in every eps-cell."""
    Tb = unfold_boundary(v_facets, spec, bmap=bmap)
    area = bmap.reference_facets.area[None, :] * Tb.mask
    vals = np.where(Tb.mask, Tb.values, 0.0)
    return (vals * area).sum(axis=-1) / area.sum(axis=-1)


def _macro_cell_means(nodal, solver, cells, axes, full_cells):
    """Average of macro nodal fields over eps-cells, broadcast to the full tiling (..., n_cells)."""
    mesh = solver.mesh
    lead = nodal.shape[:-1]
    vox = nodal[..., mesh.connectivity].mean(axis=-1)          # (..., n_vox) in C order
    vox = vox.reshape(lead + tuple(mesh.shape))
    block = [mesh.shape[k] // cells[k] for k in range(len(cells))]
    shape = lead
    for k in range(len(cells)):
        shape += (cells[k], block[k])
    means = vox.reshape(shape)
    means = means.mean(axis=tuple(len(lead) + 2 * k + 1 for k in range(len(cells))))
    # broadcast over the axes the macro model does not resolve
    full = np.empty(lead + tuple(full_cells))
    idx = [np.newaxis] * len(full_cells)
    for j, ax in enumerate(axes):
        idx[ax] = slice(None)
    full[...] = means[(Ellipsis,) + tuple(idx)]
    return full.reshape(lead + (-1,))


def relative_l2(a, b, atol=1e-12):
    """``|a - b| / |b|`` in l2, with ``|b|`` floored at ``atol`` per entry.

    The floor keeps a reference that vanishes up to rounding (e.g. ``u_e``
    for uniform data) from turning noise into an O(1) relative error.
    """
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    num = float(np.sqrt(np.sum((a - b) ** 2)))
    den = max(float(np.sqrt(np.sum(b ** 2))), atol * np.sqrt(b.size))
    return num / den


@dataclass
class StudyResult:
    """Error table of a convergence study plus the ingredients that produced it."""

    rows: list                       # (eps, err_ue, err_v)
    control_rows: list               # same with the perturbed intracellular tensor
    tensors: dict
    norms: dict                      # eps -> monitored norms
    runtimes: dict
    histories: dict = field(default_factory=dict, repr=False)

    def monotone(self, rows=None):
        rows = self.rows if rows is None else rows
        ue = [r[1] for r in rows]
        v = [r[2] for r in rows]
        return all(ue[k + 1] < ue[k] for k in range(len(ue) - 1)) and \
            all(v[k + 1] < v[k] for k in range(len(v) - 1))


def homogenized_tensors(meso, micro, M_i=None, M_e=None, rtol=1e-10, maxiter=None):
    """Second-level intracellular tensor, extracellular tensor and membrane ratio for a cell pair."""
    Mi_field = M_i if isinstance(M_i, TensorField) else TensorField.constant(micro, 1.0 if M_i is None else M_i)
    Me_field = M_e if isinstance(M_e, TensorField) else TensorField.constant(meso, 1.0 if M_e is None else M_e)
    two = two_level_homogenize(micro, Mi_field, meso, rtol=rtol, maxiter=maxiter)
    Me_eff, _ = homogenize_extracellular(meso, Me_field, rtol=rtol, maxiter=maxiter)
    return {"Mi": two.second_level.matrix, "Me": Me_eff.matrix, "mu_m": membrane_ratio(meso),
            "first_line": two.first_line, "second_line": two.second_line}


def convergence_study(meso, micro, eps_list=(0.5, 0.25, 0.125), macro_lengths=(1.0, 1.0), M_i=None, M_e=None,
                      params=None, dt=1e-2, T=1.0, stimulus=None, sample_every=5, macro_resolution=256,
                      macro_axes=None, control_factor=2.0, cell_resolution=None, v0=0.0, w0=0.0,
                      keep_histories=False, progress=None, tensors=None, ceiling=10.0):
    """Compare resolved simulations at ``delta = eps`` with the homogenized model.

    For every eps the extracellular potential is averaged over the
    extracellular part of each eps-cell (through the unfolding) and ``v`` over
    the membrane of each cell (through the boundary unfolding); the same
    cell averages are taken of the homogenized solution, which is computed
    on the axes listed in ``macro_axes`` (default: the axes on which both
    effective tensors are non-degenerate) and broadcast over the others.
    The relative l2 errors over all cells and sampled times form the table.
    The control repeats the comparison with the intracellular effective
    tensor multiplied by ``control_factor``.  ``v0`` and ``w0`` are uniform
    initial values shared by both models.  ``tensors`` may supply
    precomputed output of :func:`homogenized_tensors`.
    """
    import time

    params = params if params is not None else FhnParams()
    d = meso.dim
    tens = tensors if tensors is not None else homogenized_tensors(meso, micro, M_i, M_e)
    if macro_axes is None:
        diag_ok = (np.diag(tens["Mi"]) > 1e-12) & (np.diag(tens["Me"]) > 1e-12)
        macro_axes = tuple(int(k) for k in np.nonzero(diag_ok)[0])
    macro_axes = tuple(macro_axes)
    sub = np.ix_(macro_axes, macro_axes)
    Mi_macro, Me_macro = tens["Mi"][sub], tens["Me"][sub]
    lengths = tuple(np.broadcast_to(macro_lengths, (d,)))
    grid = MacroGrid(tuple(lengths[k] for k in macro_axes), tuple(macro_resolution for _ in macro_axes))
    n_steps = int(round(T / dt))

    def macro_history(factor):
        solver = MacroSolver(grid, factor * Mi_macro, Me_macro, tens["mu_m"], params, dt, stimulus, ceiling)
        state = solver.initial_state(v0, w0)
        _, _, _, hist = solver.run(state, n_steps, record=True)
        return solver, {k: v[::sample_every] for k, v in hist.items()}

    macro = macro_history(1.0)
    control = macro_history(control_factor)

    rows, crows, norms, times, hists = [], [], {}, {}, {}
    for eps in eps_list:
        t0 = time.perf_counter()
        spec = TiledDomainSpec(lengths, eps, eps, meso, micro, cell_resolution)
        dom = tile_microdomain(spec)
        solver = DnsSolver(spec, M_i, M_e, params, dt, stimulus, ceiling, domain=dom)
        state = solver.initial_state(v0, w0)
        _, _, hist, nrm = solver.run(state, n_steps, record_every=sample_every)
        bmap = boundary_map(spec, solver.facets, dom)
        ue_cells = cell_means_extracellular(hist["ue_vox"], spec, domain=dom)
        v_cells = cell_means_membrane(solver.facet_values(hist["v"]), spec, bmap)
        cells = tuple(spec.cells_per_axis[k] for k in macro_axes)
        entry = []
        for msolver, mh in (macro, control):
            ue_m = _macro_cell_means(mh["u_e"], msolver, cells, macro_axes, spec.cells_per_axis)
            v_m = _macro_cell_means(mh["v"], msolver, cells, macro_axes, spec.cells_per_axis)
            entry.append((eps, relative_l2(ue_cells, ue_m), relative_l2(v_cells, v_m)))
        rows.append(entry[0])
        crows.append(entry[1])
        norms[eps] = nrm
        times[eps] = time.perf_counter() - t0
        if keep_histories:
            hists[eps] = {"ue_cells": ue_cells, "v_cells": v_cells}
        if progress is not None:
            progress(eps, entry[0], entry[1], times[eps])
    return StudyResult(rows, crows, tens, norms, times, hists)
