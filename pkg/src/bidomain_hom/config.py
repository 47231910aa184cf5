"""Run configuration: a TOML file checked against a fixed schema.

Every key has a default, unknown keys are rejected, and the cross-field
constraints of the solvers (``delta <= epsilon``, commensurate tilings,
valid FHN parameters, ...) are checked at load time so that a bad file
fails before any computation starts.  Errors name the offending key as a
dotted path, e.g. ``scales.delta``.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import tomli

from .cell_solver import TensorField
from .errors import BidomainHomError, InvalidParameter, ParseError, ValidationError
from .geometry import (
    INCLUSION_SHAPES,
    TiledDomainSpec,
    build_standard_cell,
    load_cell,
    lower_channel,
)
from .ionic import FhnParams
from .macro_solver import Stimulus

STAGES = ("homogenize", "simulate", "dns", "converge", "verify-unfolding", "validate-ionic")

DEFAULTS = {
    "seed": 0,
    "out": "out",
    "stages": list(STAGES),
    "geometry": {
        "dim": 2,
        "meso_file": "",
        "micro_file": "",
        "meso_shape": "channel",
        "meso_size": 0.5,
        "meso_resolution": 16,
        "micro_shape": "square",
        "micro_size": 0.5,
        "micro_resolution": 4,
    },
    "scales": {
        "macro_lengths": [1.0, 1.0],
        "epsilon": 0.5,
        "delta": 0.5,
        "eps_list": [0.5, 0.25, 0.125],
        "cell_resolution": 0,
    },
    "tensors": {
        "M_i": 1.0,
        "M_e": 1.0,
    },
    "macro": {
        "resolution": 256,
        "axes": [],
        "tensor_file": "",
        "Mi": [],
        "Me": [],
        "mu_m": 0.0,
    },
    "ionic": {
        "a": 0.7,
        "b": 0.3,
        "lam": -1.0,
        "theta": 0.25,
        "r": 4.0,
        "box": [-10.0, 10.0],
    },
    "stimulus": {
        "enabled": True,
        "center": [0.0],
        "radius": 0.25,
        "amplitude": 2.0,
        "t_on": 0.0,
        "t_off": 0.5,
    },
    "initial": {
        "v0": 0.0,
        "w0": 0.0,
    },
    "time": {
        "dt": 1e-2,
        "T": 2.0,
        "snapshot_every": 0,
        "sample_every": 5,
    },
    "solver": {
        "rtol": 1e-10,
        "maxiter": 0,
        "ceiling": 10.0,
    },
    "study": {
        "control_factor": 2.0,
    },
}

# keys whose value may be a number, a matrix or a table (checked separately)
_FREE = {"tensors.M_i", "tensors.M_e", "initial.v0", "initial.w0", "macro.Mi", "macro.Me"}

_EXPR_NAMES = {name: getattr(np, name) for name in
               ("sin", "cos", "tan", "exp", "log", "sqrt", "abs", "tanh", "minimum", "maximum", "where", "pi")}


def _merge(defaults, given, path=""):
    out = copy.deepcopy(defaults)
    for key, val in given.items():
        full = f"{path}{key}"
        if key not in defaults:
            raise ValidationError(full, "unknown key")
        ref = defaults[key]
        if isinstance(ref, dict):
            if not isinstance(val, dict):
                raise ValidationError(full, "expected a table")
            out[key] = _merge(ref, val, full + ".")
        elif full in _FREE:
            out[key] = val
        else:
            out[key] = _coerce(full, ref, val)
    return out


def _coerce(key, ref, val):
    if isinstance(ref, bool):
        if not isinstance(val, bool):
            raise ValidationError(key, "expected true or false")
        return val
    if isinstance(ref, int):
        if isinstance(val, bool) or not isinstance(val, int):
            raise ValidationError(key, "expected an integer")
        return val
    if isinstance(ref, float):
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ValidationError(key, "expected a number")
        return float(val)
    if isinstance(ref, str):
        if not isinstance(val, str):
            raise ValidationError(key, "expected a string")
        return val
    if isinstance(ref, list):
        if not isinstance(val, list):
            raise ValidationError(key, "expected an array")
        return val
    raise ValidationError(key, "unsupported value")


def _numbers(key, vals, n=None, positive=False):
    if not isinstance(vals, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool)
                                             for v in vals):
        raise ValidationError(key, "expected an array of numbers")
    if n is not None and len(vals) != n:
        raise ValidationError(key, f"expected {n} entries, got {len(vals)}")
    out = [float(v) for v in vals]
    if positive and any(not v > 0 for v in out):
        raise ValidationError(key, "entries must be positive")
    return out


def parse_tensor(value, cell, key):
    """Tensor spec -> ``TensorField`` on ``cell``.

    Accepted forms: a positive number (isotropic), a ``d x d`` array, or a
    table ``{laminate = {m1, m2, axis, split}}`` giving ``m1`` on the part of
    the cell below ``split * L_axis`` and ``m2`` above.
    """
    d = cell.dim
    try:
        if isinstance(value, bool):
            raise ValidationError(key, "expected a number, a matrix or a laminate table")
        if isinstance(value, (int, float)):
            if not value > 0:
                raise ValidationError(key, "conductivity must be positive")
            return TensorField.constant(cell, float(value))
        if isinstance(value, list):
            m = np.array(value, dtype=float)
            if m.shape != (d, d):
                raise ValidationError(key, f"expected a {d}x{d} matrix")
            return TensorField.constant(cell, m)
        if isinstance(value, dict):
            unknown = set(value) - {"laminate"}
            if unknown:
                raise ValidationError(f"{key}.{sorted(unknown)[0]}", "unknown key")
            lam = value.get("laminate")
            if not isinstance(lam, dict):
                raise ValidationError(f"{key}.laminate", "expected a table")
            allowed = {"m1", "m2", "axis", "split"}
            extra = set(lam) - allowed
            if extra:
                raise ValidationError(f"{key}.laminate.{sorted(extra)[0]}", "unknown key")
            for name in ("m1", "m2"):
                if name not in lam:
                    raise ValidationError(f"{key}.laminate.{name}", "missing")
                if not isinstance(lam[name], (int, float)) or not lam[name] > 0:
                    raise ValidationError(f"{key}.laminate.{name}", "must be a positive number")
            axis = lam.get("axis", 0)
            if not isinstance(axis, int) or not 0 <= axis < d:
                raise ValidationError(f"{key}.laminate.axis", f"must be an integer in [0, {d})")
            split = float(lam.get("split", 0.5))
            if not 0 < split < 1:
                raise ValidationError(f"{key}.laminate.split", "must lie in (0, 1)")
            return TensorField.laminate(cell, float(lam["m1"]), float(lam["m2"]), axis=axis, split=split)
    except ValidationError:
        raise
    except (BidomainHomError, ValueError) as exc:
        raise ValidationError(key, str(exc)) from None
    raise ValidationError(key, "expected a number, a matrix or a laminate table")


def parse_initial(value, key):
    """Initial datum: a number or an expression in ``x`` (point array, ``x[0]`` is the first coordinate)."""
    if isinstance(value, bool):
        raise ValidationError(key, "expected a number or an expression string")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        try:
            code = compile(value, key, "eval")
        except SyntaxError as exc:
            raise ValidationError(key, f"invalid expression: {exc.msg}") from None
        for name in code.co_names:
            if name not in _EXPR_NAMES and name != "x":
                raise ValidationError(key, f"unknown name {name!r} in expression")

        def f(points):
            pts = np.asarray(points, dtype=float)
            out = eval(code, {"__builtins__": {}}, dict(_EXPR_NAMES, x=np.moveaxis(pts, -1, 0)))
            return np.broadcast_to(np.asarray(out, dtype=float), pts.shape[:-1]).copy()

        try:
            f(np.zeros((2, 2)))
        except Exception as exc:  # noqa: BLE001 - any evaluation failure is a config error
            raise ValidationError(key, f"expression cannot be evaluated: {exc}") from None
        f.expression = value
        return f
    raise ValidationError(key, "expected a number or an expression string")


@dataclass(frozen=True)
class RunConfig:
    """Validated configuration.  ``data`` is the full key tree with defaults filled in."""

    data: dict
    path: str | None = None

    def __getitem__(self, key):
        return self.data[key]

    @property
    def out(self):
        return Path(self.data["out"])

    @property
    def stages(self):
        return tuple(self.data["stages"])

    @property
    def seed(self):
        return int(self.data["seed"])

    def cells(self):
        g = self.data["geometry"]
        base = Path(self.path).parent if self.path else Path(".")
        d = g["dim"]
        if g["meso_file"]:
            meso = load_cell(base / g["meso_file"])
        else:
            meso = build_standard_cell("meso", g["meso_shape"], g["meso_size"], g["meso_resolution"], dim=d)
            if g["meso_shape"] == "channel":
                meso = lower_channel(meso, g["meso_size"])
        if g["micro_file"]:
            micro = load_cell(base / g["micro_file"])
        else:
            micro = build_standard_cell("micro", g["micro_shape"], g["micro_size"], g["micro_resolution"], dim=d)
        return meso, micro

    def tensor_fields(self, meso=None, micro=None):
        if meso is None or micro is None:
            meso, micro = self.cells()
        t = self.data["tensors"]
        return parse_tensor(t["M_i"], micro, "tensors.M_i"), parse_tensor(t["M_e"], meso, "tensors.M_e")

    def cell_resolution(self):
        r = self.data["scales"]["cell_resolution"]
        return None if r == 0 else r

    def spec(self, epsilon=None, delta=None, meso=None, micro=None):
        if meso is None or micro is None:
            meso, micro = self.cells()
        s = self.data["scales"]
        eps = s["epsilon"] if epsilon is None else epsilon
        dl = s["delta"] if delta is None else delta
        return TiledDomainSpec(tuple(s["macro_lengths"]), eps, dl, meso, micro, self.cell_resolution())

    def params(self):
        i = self.data["ionic"]
        return FhnParams(a=i["a"], b=i["b"], lam=i["lam"], theta=i["theta"])

    def stimulus(self):
        s = self.data["stimulus"]
        if not s["enabled"]:
            return None
        return Stimulus(tuple(float(c) for c in s["center"]), s["radius"], s["amplitude"], s["t_on"], s["t_off"])

    def initial(self):
        i = self.data["initial"]
        return parse_initial(i["v0"], "initial.v0"), parse_initial(i["w0"], "initial.w0")

    def n_steps(self):
        t = self.data["time"]
        return int(round(t["T"] / t["dt"]))

    def maxiter(self):
        m = self.data["solver"]["maxiter"]
        return None if m == 0 else m


def _validate(data, path):
    cfg = RunConfig(data, str(path) if path else None)
    for st in data["stages"]:
        if st not in STAGES:
            raise ValidationError("stages", f"unknown stage {st!r}")
    if data["seed"] < 0:
        raise ValidationError("seed", "must be non-negative")

    g = data["geometry"]
    if g["dim"] not in (1, 2, 3):
        raise ValidationError("geometry.dim", "must be 1, 2 or 3")
    for which in ("meso", "micro"):
        if not g[f"{which}_file"]:
            if g[f"{which}_shape"] not in INCLUSION_SHAPES:
                raise ValidationError(f"geometry.{which}_shape", f"must be one of {sorted(INCLUSION_SHAPES)}")
            if g[f"{which}_resolution"] < 1:
                raise ValidationError(f"geometry.{which}_resolution", "must be positive")
    try:
        meso, micro = cfg.cells()
    except (BidomainHomError, OSError, ValueError) as exc:
        raise ValidationError("geometry", str(exc)) from None
    d = meso.dim

    s = data["scales"]
    lengths = _numbers("scales.macro_lengths", s["macro_lengths"], positive=True)
    if len(lengths) == 1:
        lengths = lengths * d
    if len(lengths) != d:
        raise ValidationError("scales.macro_lengths", f"expected 1 or {d} entries, got {len(lengths)}")
    s["macro_lengths"] = lengths
    if not s["epsilon"] > 0:
        raise ValidationError("scales.epsilon", "must be positive")
    if not s["delta"] > 0:
        raise ValidationError("scales.delta", "must be positive")
    if s["delta"] > s["epsilon"]:
        raise ValidationError("scales.delta", f"delta = {s['delta']} exceeds epsilon = {s['epsilon']}")
    eps_list = _numbers("scales.eps_list", s["eps_list"], positive=True)
    if not eps_list:
        raise ValidationError("scales.eps_list", "must not be empty")
    s["eps_list"] = eps_list
    if s["cell_resolution"] < 0:
        raise ValidationError("scales.cell_resolution", "must be non-negative (0 = automatic)")
    try:
        cfg.spec(meso=meso, micro=micro)
    except (BidomainHomError, ValueError) as exc:
        raise ValidationError("scales", str(exc)) from None
    for e in eps_list:
        try:
            cfg.spec(e, e, meso, micro)
        except (BidomainHomError, ValueError) as exc:
            raise ValidationError("scales.eps_list", f"eps = {e}: {exc}") from None

    cfg.tensor_fields(meso, micro)

    m = data["macro"]
    res = m["resolution"]
    if res < 2:
        raise ValidationError("macro.resolution", "must be at least 2")
    axes = m["axes"]
    if not all(isinstance(a, int) and not isinstance(a, bool) and 0 <= a < d for a in axes) \
            or len(set(axes)) != len(axes):
        raise ValidationError("macro.axes", f"expected distinct axis indices in [0, {d})")
    n_ax = len(axes) if axes else None
    for name in ("Mi", "Me"):
        val = m[name]
        if isinstance(val, list) and not val:
            continue
        k = f"macro.{name}"
        if isinstance(val, (int, float)) and not isinstance(val, bool):
            if not val > 0:
                raise ValidationError(k, "must be positive")
            continue
        try:
            arr = np.array(val, dtype=float)
        except (TypeError, ValueError):
            raise ValidationError(k, "expected a number or a square matrix") from None
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or (n_ax and arr.shape[0] != n_ax):
            raise ValidationError(k, "expected a square matrix matching macro.axes")
    given = [isinstance(m[n], (int, float)) or bool(m[n]) for n in ("Mi", "Me")]
    if any(given) and not all(given):
        raise ValidationError("macro.Mi" if not given[0] else "macro.Me", "inline macro tensors come in pairs")
    if any(given) and not m["mu_m"] > 0:
        raise ValidationError("macro.mu_m", "must be positive when inline tensors are given")
    if m["mu_m"] < 0:
        raise ValidationError("macro.mu_m", "must be non-negative (0 = from the meso cell)")

    try:
        cfg.params()
    except InvalidParameter as exc:
        raise ValidationError("ionic", str(exc)) from None
    i = data["ionic"]
    if not i["r"] > 2:
        raise ValidationError("ionic.r", "must exceed 2")
    box = _numbers("ionic.box", i["box"], n=2)
    if not box[0] < box[1]:
        raise ValidationError("ionic.box", "lower bound must be below the upper bound")

    st = data["stimulus"]
    c = _numbers("stimulus.center", st["center"])
    if not 1 <= len(c) <= d:
        raise ValidationError("stimulus.center", f"expected 1 to {d} coordinates")
    if not st["radius"] > 0:
        raise ValidationError("stimulus.radius", "must be positive")
    if not st["t_on"] <= st["t_off"]:
        raise ValidationError("stimulus.t_off", "must not precede t_on")

    cfg.initial()

    t = data["time"]
    if not t["dt"] > 0:
        raise ValidationError("time.dt", "must be positive")
    if not t["T"] > 0:
        raise ValidationError("time.T", "must be positive")
    n = t["T"] / t["dt"]
    if abs(n - round(n)) > 1e-9 * max(1.0, n):
        raise ValidationError("time.T", "must be an integer multiple of time.dt")
    if t["snapshot_every"] < 0:
        raise ValidationError("time.snapshot_every", "must be non-negative")
    if t["sample_every"] < 1:
        raise ValidationError("time.sample_every", "must be positive")

    so = data["solver"]
    if not 0 < so["rtol"] < 1:
        raise ValidationError("solver.rtol", "must lie in (0, 1)")
    if so["maxiter"] < 0:
        raise ValidationError("solver.maxiter", "must be non-negative (0 = automatic)")
    if not so["ceiling"] > 0:
        raise ValidationError("solver.ceiling", "must be positive")
    if not data["study"]["control_factor"] > 0:
        raise ValidationError("study.control_factor", "must be positive")
    return cfg


def loads_config(text, path=None):
    """Parse and validate configuration text."""
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ParseError(f"{path or '<string>'}: {exc}") from None
    data = _merge(DEFAULTS, raw)
    return _validate(data, path)


def load_config(path):
    """Read, merge with defaults and validate a configuration file."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read {p}: {exc}") from None
    return loads_config(text, p)
