"""FitzHugh-Nagumo membrane kinetics and sampled checks of the structural assumptions.

The ionic current splits as ``I_ion(v, w) = I1(v) + I2(w)`` with

    I1(v) = lam * v * (1 - v) * (v - theta),     I2(w) = -lam * w,

and the gating variable obeys ``dw/dt = H(v, w) = a v - b w``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import AssumptionViolated, InvalidParameter


@dataclass(frozen=True)
class FhnParams:
    """FitzHugh-Nagumo parameters with ``a, b >= 0``, ``lam < 0`` and ``0 < theta < 1``."""

    a: float = 0.7
    b: float = 0.3
    lam: float = -1.0
    theta: float = 0.25

    def __post_init__(self):
        vals = [self.a, self.b, self.lam, self.theta]
        if not all(np.isfinite(vals)):
            raise InvalidParameter("FitzHugh-Nagumo parameters must be finite")
        if self.a < 0 or self.b < 0:
            raise InvalidParameter(f"a and b must be non-negative (a={self.a}, b={self.b})")
        if not self.lam < 0:
            raise InvalidParameter(f"lambda must be negative, got {self.lam}")
        if not 0 < self.theta < 1:
            raise InvalidParameter(f"theta must lie in (0, 1), got {self.theta}")

    def as_dict(self):
        return asdict(self)


def i1(v, p):
    return p.lam * v * (1.0 - v) * (v - p.theta)


def di1(v, p):
    """Derivative of ``I1``."""
    return p.lam * (-3.0 * v ** 2 + 2.0 * (1.0 + p.theta) * v - p.theta)


def i2(w, p):
    return -p.lam * w


def i_ion(v, w, p):
    return i1(v, p) + i2(w, p)


def h_gate(v, w, p):
    return p.a * v - p.b * w


def kinetics(v, w, p, i_app=0.0):
    """Right-hand side ``(dv/dt, dw/dt) = (-I_ion + I_app, H)`` of the membrane ODE."""
    return -i_ion(v, w, p) + i_app, h_gate(v, w, p)


def rk4_step(v, w, dt, p, i_app=0.0):
    """One classical Runge-Kutta step of the membrane ODE (``i_app`` frozen over the step)."""
    k1v, k1w = kinetics(v, w, p, i_app)
    k2v, k2w = kinetics(v + 0.5 * dt * k1v, w + 0.5 * dt * k1w, p, i_app)
    k3v, k3w = kinetics(v + 0.5 * dt * k2v, w + 0.5 * dt * k2w, p, i_app)
    k4v, k4w = kinetics(v + dt * k3v, w + dt * k3w, p, i_app)
    return (v + dt / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v),
            w + dt / 6.0 * (k1w + 2 * k2w + 2 * k3w + k4w))


@dataclass
class AssumptionReport:
    """Constants that make the structural inequalities hold on the sample box."""

    r: float
    box: tuple
    alpha1: float
    alpha2: float
    alpha3: float
    alpha4: float
    alpha5: float
    beta1: float
    beta2: float
    C: float
    checks: dict = field(default_factory=dict)

    def rows(self):
        keys = ("r", "alpha1", "alpha2", "alpha3", "alpha4", "alpha5", "beta1", "beta2", "C")
        return [(k, float(getattr(self, k))) for k in keys]


def _fail(condition, message, witness):
    raise AssumptionViolated(f"{condition}: {message} at {witness}", witness=witness, condition=condition)


def validate_assumptions(p, r=4.0, box=(-10.0, 10.0), n_samples=2001, n_pairs=20000, seed=0,
                         growth_probes=12, margin=1e-2):
    """Fit and check the constants of the structural assumptions on ``I1``, ``I2`` and ``H``.

    ``box`` is the sampled range of both ``v`` and ``w``.  The growth bound on
    ``I1`` is fitted on the box and at the probes ``|v| = B 2^k`` outside it
    (with the lower bound taken up to an additive constant, so the zeros of
    ``I1`` are admissible).  The exponent is checked at the probes: a growth
    exponent that does not match the polynomial degree makes
    ``|I1| / |v|^(r-1)`` drift geometrically and fails.  ``beta1`` is the
    smallest shift making ``I1(z) + beta1 z`` increasing, plus ``margin``; ``beta2 = 1`` (any value
    works since only differences enter).  ``C`` is the sampled constant of the
    strong monotonicity inequality.  Raises ``AssumptionViolated`` with the
    offending point on the first failure.
    """
    if not r > 2:
        raise InvalidParameter(f"growth exponent must exceed 2, got {r}")
    lo, hi = float(box[0]), float(box[1])
    rng = np.random.default_rng(seed)
    v = np.linspace(lo, hi, n_samples)
    checks = {}

    # two-sided growth bound on I1: the exponent is read off the drift of
    # |I1| / |v|^(r-1) over successive doublings outside the box, which tends
    # to 2^(deg - r + 1) and is 1 only for the right exponent
    far = max(abs(lo), abs(hi)) * 2.0 ** np.arange(1, growth_probes + 1)
    for probes in (-far, far):
        q = np.abs(i1(probes, p)) / np.abs(probes) ** (r - 1)
        drift = np.abs(np.log2(q[1:] / q[:-1]))
        if not np.all(drift[-3:] < 1e-3):
            k = int(np.argmax(drift > 1e-3))
            _fail("I1_growth", f"|I1| does not grow like |v|^{r - 1:g} (ratio drifts by 2^{drift[k]:.3g} "
                  "per doubling)", float(probes[k + 1]))
    sample = np.concatenate([v, -far, far])
    a1 = np.abs(i1(sample, p))
    pw = np.abs(sample) ** (r - 1)
    upper = np.max(a1 / (pw + 1.0))
    lower = np.max(0.5 * (-a1 + np.sqrt(a1 ** 2 + 4.0 * pw)))
    alpha1 = float(max(upper, lower, 1.0))
    checks["I1_growth"] = True

    w = np.linspace(lo, hi, n_samples)
    alpha2 = float(-p.lam)
    if np.any(np.abs(i2(w, p)) > alpha2 * (np.abs(w) + 1.0) + 1e-12):
        _fail("I2_bound", "linear bound on I2 violated", float(w[0]))
    checks["I2_bound"] = True

    vs = rng.uniform(lo, hi, n_pairs)
    ws = rng.uniform(lo, hi, n_pairs)
    alpha3 = float(max(p.a, p.b, 1e-300))
    if np.any(np.abs(h_gate(vs, ws, p)) > alpha3 * (np.abs(vs) + np.abs(ws) + 1.0) + 1e-12):
        k = int(np.argmax(np.abs(h_gate(vs, ws, p)) - alpha3 * (np.abs(vs) + np.abs(ws) + 1.0)))
        _fail("H_bound", "linear bound on H violated", (float(vs[k]), float(ws[k])))
    checks["H_bound"] = True

    # coercivity I2(w) v - alpha4 H(v, w) w >= alpha5 |w|^2: alpha4 = -lam/a cancels the v w term
    if p.a <= 0:
        # -lam v w cannot be absorbed: pick v of the opposite sign to w and large
        _fail("coercivity", "a = 0 leaves an uncontrolled v w term", (lo, 1.0))
    if p.b <= 0:
        # with the v w term cancelled the left side vanishes, so no alpha5 > 0 exists
        _fail("coercivity", "b = 0 gives alpha5 = 0", (0.0, 1.0))
    alpha4 = float(-p.lam / p.a)
    alpha5 = float(alpha4 * p.b)
    lhs = i2(ws, p) * vs - alpha4 * h_gate(vs, ws, p) * ws
    slack = lhs - alpha5 * ws ** 2
    tol = 1e-9 * np.maximum(1.0, np.abs(lhs))
    if np.any(slack < -tol):
        k = int(np.argmin(slack))
        _fail("coercivity", "coercivity of (I2, H) violated", (float(vs[k]), float(ws[k])))
    checks["coercivity"] = True

    # monotone shift of I1
    vc = (1.0 + p.theta) / 3.0
    deficit = max(0.0, -float(di1(vc, p)), -float(di1(v, p).min()))
    beta1 = deficit + margin
    beta2 = 1.0

    def tilde(z):
        return i1(z, p) + beta1 * z + beta2

    tv = tilde(v)
    if np.any(np.diff(tv) <= 0):
        k = int(np.argmin(np.diff(tv)))
        _fail("monotone", "shifted I1 is not strictly increasing", float(v[k]))
    checks["monotone"] = True

    z1 = rng.uniform(lo, hi, n_pairs)
    z2 = rng.uniform(lo, hi, n_pairs)
    keep = np.abs(z1 - z2) > 1e-8
    z1, z2 = z1[keep], z2[keep]
    num = (tilde(z1) - tilde(z2)) * (z1 - z2)
    den = (1.0 + np.abs(z1) + np.abs(z2)) ** (r - 2) * (z1 - z2) ** 2
    ratio = num / den
    if np.any(ratio <= 0):
        k = int(np.argmin(ratio))
        _fail("strong_monotone", "strong monotonicity violated", (float(z1[k]), float(z2[k])))
    C = float(1.0 / ratio.min())
    checks["strong_monotone"] = True

    return AssumptionReport(r, (lo, hi), alpha1, alpha2, alpha3, alpha4, alpha5, beta1, beta2, C, checks)
