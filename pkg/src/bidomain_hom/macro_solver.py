"""Time stepping of the homogenized bidomain system on a box.

Unknowns are nodal values of ``v``, ``u_e`` and ``w`` on a ``VoxelMesh``
(d-linear elements, lumped mass, homogeneous Neumann boundary).  With
``u_i = v + u_e`` the system reads

    mu dv/dt - div(Mi grad(v + u_e)) + mu I_ion(v, w) = mu I_app
    div(Mi grad(v + u_e)) + div(Me grad u_e) = 0
    dw/dt = H(v, w)

Each step is a Godunov splitting: one RK4 step of the kinetics at every
node, then an implicit Euler step of the diffusion, which is the symmetric
block system

    [ mu M/dt + K_i   K_i       ] [ v   ]   [ mu M v* / dt ]
    [ K_i             K_i + K_e ] [ u_e ] = [ 0            ]

with ``u_e`` pinned at one node and then shifted to zero mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import LinearSolveFailure, StabilityBreach
from .fem import VoxelMesh
from .ionic import FhnParams, rk4_step

DIAGNOSTIC_COLUMNS = ("t", "norm_v", "norm_w", "int_ue", "min_v", "max_v")


@dataclass(frozen=True)
class Stimulus:
    """Applied current ``amplitude`` inside a ball during ``[t_on, t_off)``.

    ``center`` may list fewer coordinates than the grid dimension; the
    remaining axes are ignored, which gives a band-shaped stimulus.
    """

    center: tuple
    radius: float
    amplitude: float
    t_on: float = 0.0
    t_off: float = np.inf

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        c = np.asarray(self.center, dtype=float)
        if not self.t_on <= t < self.t_off:
            return np.zeros(x.shape[:-1])
        dist = np.linalg.norm(x[..., :len(c)] - c, axis=-1)
        return np.where(dist <= self.radius, float(self.amplitude), 0.0)


@dataclass(frozen=True)
class MacroGrid:
    """Box ``[0, L_1] x ... x [0, L_d]`` split into ``shape`` voxels."""

    lengths: tuple
    shape: tuple

    def __post_init__(self):
        shape = tuple(int(n) for n in np.atleast_1d(self.shape))
        lengths = tuple(float(x) for x in np.broadcast_to(self.lengths, (len(shape),)))
        if min(shape) < 1 or min(lengths) <= 0:
            raise ValueError("grid needs positive lengths and at least one voxel per axis")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "lengths", lengths)

    @property
    def dim(self):
        return len(self.shape)

    @property
    def spacing(self):
        return tuple(L / n for L, n in zip(self.lengths, self.shape))

    @property
    def volume(self):
        return float(np.prod(self.lengths))

    def mesh(self):
        return VoxelMesh(self.shape, self.spacing, np.ones(self.shape, dtype=bool), periodic=False)


@dataclass
class BidomainState:
    """Nodal ``v``, ``u_e``, ``w`` at time ``t``; ``u_i = v + u_e``."""

    t: float
    v: np.ndarray
    u_e: np.ndarray
    w: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def u_i(self):
        return self.v + self.u_e

    def copy(self):
        return BidomainState(self.t, self.v.copy(), self.u_e.copy(), self.w.copy(), dict(self.diagnostics))


def _matrix(t, dim):
    m = np.asarray(getattr(t, "matrix", t), dtype=float)
    if m.ndim == 0:
        m = m * np.eye(dim)
    if m.shape != (dim, dim):
        raise ValueError(f"tensor of shape {m.shape} does not match dimension {dim}")
    if np.abs(m - m.T).max() > 1e-12 * max(1.0, np.abs(m).max()):
        raise ValueError("tensor must be symmetric")
    return m


def _sample(f, t, x, n):
    if f is None:
        return np.zeros(n)
    if callable(f):
        return np.broadcast_to(np.asarray(f(t, x), dtype=float), (n,)).copy()
    return np.broadcast_to(np.asarray(f, dtype=float), (n,)).copy()


class MacroSolver:
    """Homogenized bidomain integrator with a fixed time step (the diffusion matrix is factorized once)."""

    def __init__(self, grid, Mi, Me, mu_m, params=None, dt=1e-3, i_app=None, ceiling=10.0):
        if not dt > 0:
            raise ValueError("dt must be positive")
        if not mu_m > 0:
            raise ValueError("mu_m must be positive")
        self.grid = grid
        self.mesh = grid.mesh()
        self.params = params if params is not None else FhnParams()
        self.dt = float(dt)
        self.mu = float(mu_m)
        self.i_app = i_app
        self.ceiling = float(ceiling)
        d = grid.dim
        self.Mi = _matrix(Mi, d)
        self.Me = _matrix(Me, d)
        for name, m in (("Mi", self.Mi), ("Me", self.Me)):
            if np.linalg.eigvalsh(m).min() < -1e-14:
                raise ValueError(f"{name} must be positive semi-definite")
        self.Ki = self.mesh.stiffness(self.Mi)
        self.Ke = self.mesh.stiffness(self.Me)
        self.mass = self.mesh.lumped_mass
        self.nodes = self.mesh.node_coordinates()
        n = self.mesh.n_nodes
        self.n = n
        M = sp.diags(self.mu * self.mass / self.dt)
        A = sp.bmat([[M + self.Ki, self.Ki], [self.Ki, self.Ki + self.Ke]], format="csc")
        self.A = A
        keep = np.r_[np.arange(n), np.arange(n + 1, 2 * n)]
        self._keep = keep
        self._lu = self._factor(A[keep][:, keep], "diffusion")
        self._lu_ell = None

    @staticmethod
    def _factor(mat, what):
        try:
            lu = spla.splu(sp.csc_matrix(mat))
        except RuntimeError as exc:
            raise LinearSolveFailure(f"{what} matrix is singular: {exc}") from None
        diag = np.abs(lu.U.diagonal())
        if diag.min() <= 1e-13 * diag.max():
            raise LinearSolveFailure(f"{what} matrix is numerically singular")
        return lu

    def _gauge(self, ue):
        return ue - self.mass @ ue / self.mass.sum()

    def _check(self, x, A, b, what):
        Ax = A @ x
        res = np.linalg.norm(Ax - b)
        scale = np.linalg.norm(b) + abs(A).max() * np.linalg.norm(x)
        if not np.isfinite(res) or res > 1e-8 * scale:
            raise LinearSolveFailure(f"{what} solve residual {res:.3e}")

    def elliptic_ue(self, v):
        """Extracellular potential compatible with ``v``: ``(K_i + K_e) u_e = -K_i v``, zero mean."""
        n = self.n
        if self._lu_ell is None:
            B = (self.Ki + self.Ke).tocsc()
            self._B = B
            self._lu_ell = self._factor(B[1:][:, 1:], "elliptic")
        rhs = -(self.Ki @ v)
        # Neumann compatibility: remove the rounding-level constant component
        rhs -= rhs.mean()
        ue = np.zeros(n)
        ue[1:] = self._lu_ell.solve(rhs[1:])
        self._check(ue, self._B, rhs, "elliptic")
        return self._gauge(ue)

    def initial_state(self, v0=0.0, w0=0.0, t0=0.0):
        x = self.nodes
        v = _sample(v0 if not callable(v0) else (lambda t, x: v0(x)), t0, x, self.n)
        w = _sample(w0 if not callable(w0) else (lambda t, x: w0(x)), t0, x, self.n)
        state = BidomainState(float(t0), v, self.elliptic_ue(v), w)
        state.diagnostics = self.diagnostics(state)
        return state

    def diagnostics(self, state):
        m = self.mass
        return {
            "t": state.t,
            "norm_v": float(np.sqrt(m @ state.v ** 2)),
            "norm_w": float(np.sqrt(m @ state.w ** 2)),
            "int_ue": float(m @ state.u_e),
            "min_v": float(state.v.min()),
            "max_v": float(state.v.max()),
        }

    def step(self, state):
        """Advance one time step; returns a new state."""
        dt = self.dt
        iapp = _sample(self.i_app, state.t, self.nodes, self.n)
        v_star, w_new = rk4_step(state.v, state.w, dt, self.params, iapp)
        if not np.all(np.isfinite(v_star)) or np.abs(v_star).max() > self.ceiling:
            raise StabilityBreach(f"|v| exceeded {self.ceiling} at t={state.t + dt:.6g}")
        n = self.n
        b = np.concatenate([self.mu * self.mass * v_star / dt, np.zeros(n)])
        x = np.zeros(2 * n)
        x[self._keep] = self._lu.solve(b[self._keep])
        self._check(x, self.A, b, "diffusion")
        v = x[:n]
        ue = self._gauge(x[n:])
        if np.abs(v).max() > self.ceiling:
            raise StabilityBreach(f"|v| exceeded {self.ceiling} at t={state.t + dt:.6g}")
        new = BidomainState(state.t + dt, v, ue, w_new)
        new.diagnostics = self.diagnostics(new)
        return new

    def run(self, state, n_steps, snapshot_every=0, record=False, callback=None):
        """March ``n_steps`` steps.

        Returns ``(final_state, diagnostics, snapshots, history)``: the
        diagnostics array has one row per time level (including the initial
        one) in the order of ``DIAGNOSTIC_COLUMNS``; snapshots are copies of
        the state every ``snapshot_every`` steps (and at the start); with
        ``record`` the history holds ``v`` and ``u_e`` at every level.
        """
        rows = [[state.diagnostics[c] for c in DIAGNOSTIC_COLUMNS]]
        snaps = [state.copy()] if snapshot_every else []
        hist_v = [state.v.copy()] if record else None
        hist_ue = [state.u_e.copy()] if record else None
        for k in range(1, n_steps + 1):
            state = self.step(state)
            rows.append([state.diagnostics[c] for c in DIAGNOSTIC_COLUMNS])
            if snapshot_every and k % snapshot_every == 0:
                snaps.append(state.copy())
            if record:
                hist_v.append(state.v.copy())
                hist_ue.append(state.u_e.copy())
            if callback is not None:
                callback(k, state)
        history = None
        if record:
            history = {"v": np.array(hist_v), "u_e": np.array(hist_ue)}
        return state, np.array(rows), snaps, history


def step(state, dt, tensors, mu_m, i_app, p, grid):
    """One splitting step for a single call (builds and factorizes the operator)."""
    Mi, Me = tensors
    solver = MacroSolver(grid, Mi, Me, mu_m, p, dt, i_app)
    return solver.step(state)


def run(grid, Mi, Me, mu_m, params, dt, T, v0=0.0, w0=0.0, i_app=None, snapshot_every=0,
        record=False, ceiling=10.0):
    """Fixed-step run from ``t = 0`` to ``T``; see ``MacroSolver.run`` for the outputs."""
    n_steps = int(round(T / dt))
    if abs(n_steps * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError("T must be an integer multiple of dt")
    solver = MacroSolver(grid, Mi, Me, mu_m, params, dt, i_app, ceiling)
    state = solver.initial_state(v0, w0)
    return solver, solver.run(state, n_steps, snapshot_every, record)


def front_position(v, x, level=0.5):
    """Largest coordinate where a 1D profile ``v(x)`` exceeds ``level`` (linear interpolation)."""
    above = np.nonzero(v >= level)[0]
    if len(above) == 0:
        return np.nan
    k = above[-1]
    if k == len(v) - 1:
        return float(x[k])
    return float(x[k] + (v[k] - level) / (v[k] - v[k + 1]) * (x[k + 1] - x[k]))
