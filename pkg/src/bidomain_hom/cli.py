"""Command line front end and the stage pipeline.

Every subcommand reads the same configuration file and writes into its own
directory below ``--out``::

    tensors/    homogenize        tensors.csv (level,p,q,value), corrector VTK files
    macro/      simulate          diagnostics.csv, v_*.vtk / ue_*.vtk snapshots
    dns/        dns               diagnostics.csv, norms.csv, snapshots
    converge/   converge          errors.csv (eps,err_ue,err_v), control.csv, norms.csv
    unfolding/  verify-unfolding  identities.csv, two_scale.csv
    ionic/      validate-ionic    assumptions.csv
    report.txt  one summary block per stage that ran

``run`` executes the stages listed in the configuration in pipeline order.
CSV files hold no timestamps and print floats with 17 significant digits,
so a rerun with the same configuration reproduces them byte for byte.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def fmt(x):
    """CSV field: integers as is, floats with 17 significant digits, sequences joined by ``;``."""
    if x is None or isinstance(x, (bool, str)):
        return str(x)
    if isinstance(x, int):
        return str(x)
    if hasattr(x, "__len__"):
        return ";".join(fmt(v) for v in list(x))
    if hasattr(x, "item"):
        x = x.item()
        if isinstance(x, int):
            return str(x)
    return f"{float(x):.17g}"


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)] + [",".join(fmt(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


def read_tensor_csv(path):
    """``{level: matrix}`` from a ``level,p,q,value`` file."""
    import numpy as np

    entries = {}
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "level,p,q,value":
        raise ValueError(f"{path}: expected the header level,p,q,value")
    for line in lines[1:]:
        if not line.strip():
            continue
        level, p, q, val = line.split(",")
        entries.setdefault(level, {})[(int(p), int(q))] = float(val)
    out = {}
    for level, ent in entries.items():
        n = max(max(k) for k in ent) + 1
        m = np.zeros((n, n))
        for (p, q), v in ent.items():
            m[p, q] = v
        out[level] = m
    return out


class Pipeline:
    """Runs stages for one validated configuration and collects the report."""

    def __init__(self, cfg, out=None):
        self.cfg = cfg
        self.out = Path(out) if out is not None else cfg.out
        self.meso, self.micro = cfg.cells()
        self.M_i, self.M_e = cfg.tensor_fields(self.meso, self.micro)
        self.report = []
        self._tensors = None

    # -- helpers -----------------------------------------------------------
    def _log(self, title, lines):
        self.report.append((title, list(lines)))

    def write_report(self):
        self.out.mkdir(parents=True, exist_ok=True)
        text = []
        for title, lines in self.report:
            text.append(f"[{title}]")
            text.extend(lines)
            text.append("")
        (self.out / "report.txt").write_text("\n".join(text))

    def _homogenized(self):
        """Effective tensors, from this run, ``macro.tensor_file`` or inline values."""
        import numpy as np

        from .geometry import membrane_ratio
        from .micro_solver import homogenized_tensors

        if self._tensors is not None:
            return self._tensors
        m = self.cfg["macro"]
        mu = m["mu_m"] if m["mu_m"] > 0 else membrane_ratio(self.meso)
        if isinstance(m["Mi"], (int, float)) or m["Mi"]:
            Mi, Me = (np.atleast_2d(np.array(m[k], dtype=float)) for k in ("Mi", "Me"))
            tens = {"Mi": Mi, "Me": Me, "mu_m": mu, "inline": True}
        elif m["tensor_file"]:
            base = Path(self.cfg.path).parent if self.cfg.path else Path(".")
            t = read_tensor_csv(base / m["tensor_file"])
            tens = {"Mi": t["intra"], "Me": t["extra"], "mu_m": t["mu_m"][0, 0] if m["mu_m"] == 0 else mu}
        else:
            so = self.cfg["solver"]
            tens = homogenized_tensors(self.meso, self.micro, self.M_i, self.M_e, rtol=so["rtol"],
                                       maxiter=self.cfg.maxiter())
            tens["mu_m"] = mu
        self._tensors = tens
        return tens

    def _macro_axes(self, tens):
        import numpy as np

        axes = self.cfg["macro"]["axes"]
        if tens.get("inline"):
            n = tens["Mi"].shape[0]
            return tuple(axes) if axes else tuple(range(n)), tens["Mi"], tens["Me"]
        if not axes:
            ok = (np.diag(tens["Mi"]) > 1e-12) & (np.diag(tens["Me"]) > 1e-12)
            axes = [int(k) for k in np.nonzero(ok)[0]]
        sub = np.ix_(axes, axes)
        return tuple(axes), tens["Mi"][sub], tens["Me"][sub]

    # -- stages ------------------------------------------------------------
    def homogenize(self):
        from .cell_solver import homogenize_extracellular, two_level_homogenize
        from .geometry import membrane_ratio
        from .vtk import write_structured_points

        so = self.cfg["solver"]
        two = two_level_homogenize(self.micro, self.M_i, self.meso, rtol=so["rtol"], maxiter=self.cfg.maxiter())
        Me, corr_e = homogenize_extracellular(self.meso, self.M_e, rtol=so["rtol"], maxiter=self.cfg.maxiter())
        mu = membrane_ratio(self.meso)
        d = self.meso.dim
        rows = []
        for j, key in enumerate(two.keys):
            level = "micro" if len(two.keys) == 1 else f"micro_{j}"
            m = two.first_level_samples[key].matrix
            rows += [(level, p, q, m[p, q]) for p in range(d) for q in range(d)]
        for level, m in (("intra", two.second_level.matrix), ("intra_flux", two.first_line),
                         ("intra_double", two.second_line), ("extra", Me.matrix)):
            rows += [(level, p, q, m[p, q]) for p in range(d) for q in range(d)]
        rows.append(("mu_m", 0, 0, mu))
        tdir = self.out / "tensors"
        write_csv(tdir / "tensors.csv", ("level", "p", "q", "value"), rows)
        for q in range(d):
            write_structured_points(tdir / f"chi_{q}.vtk", two.meso_correctors.grid(q), self.meso.spacing,
                                    name=f"chi_{q}")
            write_structured_points(tdir / f"chi_e_{q}.vtk", corr_e.grid(q), self.meso.spacing, name=f"chi_e_{q}")
            for j, key in enumerate(two.keys):
                write_structured_points(tdir / f"theta_{j}_{q}.vtk", two.micro_correctors[key].grid(q),
                                        self.micro.spacing, name=f"theta_{q}")
        self._tensors = {"Mi": two.second_level.matrix, "Me": Me.matrix, "mu_m": mu,
                         "first_line": two.first_line, "second_line": two.second_line}
        gap = float(abs(two.first_line - two.second_line).max())
        self._log("homogenize", [
            f"Mi_eff = {two.second_level.matrix.tolist()}",
            f"Me_eff = {Me.matrix.tolist()}",
            f"mu_m = {mu:.17g}",
            f"double-integral gap = {gap:.3e}",
        ])
        return self._tensors

    def simulate(self):
        import numpy as np

        from .macro_solver import DIAGNOSTIC_COLUMNS, MacroGrid, MacroSolver, Stimulus
        from .vtk import write_structured_points

        cfg = self.cfg
        tens = self._homogenized()
        axes, Mi, Me = self._macro_axes(tens)
        lengths = cfg["scales"]["macro_lengths"]
        res = cfg["macro"]["resolution"]
        grid = MacroGrid(tuple(lengths[a] for a in axes), tuple(res for _ in axes))
        stim = cfg.stimulus()
        if stim is not None:
            center = tuple(stim.center[a] for a in axes if a < len(stim.center))
            stim = Stimulus(center, stim.radius, stim.amplitude, stim.t_on, stim.t_off)
        t = cfg["time"]
        so = cfg["solver"]
        solver = MacroSolver(grid, Mi, Me, tens["mu_m"], cfg.params(), t["dt"], stim, so["ceiling"])
        v0, w0 = cfg.initial()
        d = self.meso.dim

        def embed(f):
            if not callable(f):
                return f

            def g(x):
                full = np.zeros(x.shape[:-1] + (d,))
                full[..., list(axes)] = x
                return f(full)
            return g

        state = solver.initial_state(embed(v0), embed(w0))
        mdir = self.out / "macro"
        mdir.mkdir(parents=True, exist_ok=True)
        every = t["snapshot_every"]
        shape = tuple(n + 1 for n in grid.shape)

        def snap(k, s):
            write_structured_points(mdir / f"v_{k:06d}.vtk", s.v.reshape(shape), grid.spacing, name="v")
            write_structured_points(mdir / f"ue_{k:06d}.vtk", s.u_e.reshape(shape), grid.spacing, name="u_e")

        if every:
            snap(0, state)
        final, diag, _, _ = solver.run(state, cfg.n_steps(),
                                       callback=(lambda k, s: snap(k, s) if k % every == 0 else None)
                                       if every else None)
        write_csv(mdir / "diagnostics.csv", DIAGNOSTIC_COLUMNS, diag.tolist())
        self._log("simulate", [
            f"axes = {list(axes)}, grid = {list(grid.shape)}, steps = {cfg.n_steps()}",
            f"final max|v| = {np.abs(final.v).max():.6g}",
        ])
        return final, diag

    def dns(self):
        import numpy as np

        from .micro_solver import MICRO_DIAGNOSTIC_COLUMNS, NORM_NAMES, DnsSolver
        from .vtk import write_structured_points

        cfg = self.cfg
        spec = cfg.spec(meso=self.meso, micro=self.micro)
        t = cfg["time"]
        solver = DnsSolver(spec, self.M_i, self.M_e, cfg.params(), t["dt"], cfg.stimulus(),
                           cfg["solver"]["ceiling"])
        v0, w0 = cfg.initial()
        state = solver.initial_state(v0, w0)
        every = t["snapshot_every"]
        final, diag, hist, norms = solver.run(state, cfg.n_steps(), record_every=every or 1, record=bool(every))
        ddir = self.out / "dns"
        write_csv(ddir / "diagnostics.csv", MICRO_DIAGNOSTIC_COLUMNS, diag.tolist())
        write_csv(ddir / "norms.csv", ("name", "value"), [(k, norms[k]) for k in NORM_NAMES])
        if every:
            for j in range(len(hist["t"])):
                k = j * every
                write_structured_points(ddir / f"ui_{k:06d}.vtk", hist["ui_vox"][j], spec.spacing, name="u_i")
                write_structured_points(ddir / f"ue_{k:06d}.vtk", hist["ue_vox"][j], spec.spacing, name="u_e")
        self._log("dns", [
            f"eps = {spec.epsilon:.17g}, delta = {spec.delta:.17g}, grid = {list(spec.grid_shape)}",
            f"membrane nodes = {solver.n_membrane}, steps = {cfg.n_steps()}",
            f"final max|v| = {np.abs(final.v).max():.6g}",
        ])
        return final, diag, norms

    def converge(self):
        from .micro_solver import NORM_NAMES, convergence_study

        cfg = self.cfg
        tens = self._homogenized()
        axes, _, _ = self._macro_axes(tens)
        t = cfg["time"]
        res = convergence_study(
            self.meso, self.micro, eps_list=tuple(cfg["scales"]["eps_list"]),
            macro_lengths=tuple(cfg["scales"]["macro_lengths"]), M_i=self.M_i, M_e=self.M_e,
            params=cfg.params(), dt=t["dt"], T=t["T"], stimulus=cfg.stimulus(), sample_every=t["sample_every"],
            macro_resolution=cfg["macro"]["resolution"], macro_axes=axes,
            control_factor=cfg["study"]["control_factor"], cell_resolution=cfg.cell_resolution(),
            tensors=tens, ceiling=cfg["solver"]["ceiling"])
        cdir = self.out / "converge"
        write_csv(cdir / "errors.csv", ("eps", "err_ue", "err_v"), res.rows)
        write_csv(cdir / "control.csv", ("eps", "err_ue", "err_v"), res.control_rows)
        write_csv(cdir / "norms.csv", ("eps", "name", "value"),
                  [(e, k, n[k]) for e, n in res.norms.items() for k in NORM_NAMES])
        self._log("converge", [f"eps = {e:.6g}: err_ue = {a:.6g}, err_v = {b:.6g}" for e, a, b in res.rows] + [
            f"monotone decrease: {res.monotone()}",
            f"control monotone: {res.monotone(res.control_rows)}",
        ])
        return res

    def verify_unfolding(self):
        import numpy as np

        from .unfolding import check_identities, two_scale_error

        cfg = self.cfg
        spec = cfg.spec(meso=self.meso, micro=self.micro)
        rng = np.random.default_rng(cfg.seed)
        u, v = rng.standard_normal((2,) + spec.grid_shape)
        rep = check_identities(u, v, spec)
        udir = self.out / "unfolding"
        write_csv(udir / "identities.csv", ("identity", "residual"), list(rep.items()))
        d = spec.dim
        n = 32
        x = (np.arange(n) + 0.5) / n
        X = np.stack(np.meshgrid(*[x * L for L in spec.macro_lengths], indexing="ij"), -1).reshape(-1, d)

        def g(p):
            return np.sin(2 * np.pi * p[..., 0]) + p[..., -1]

        def Phi(y):
            return np.cos(2 * np.pi * y[..., -1])

        rows = [(e, two_scale_error(spec.with_scales(e, e, cfg.cell_resolution()), g, Phi, X))
                for e in cfg["scales"]["eps_list"]]
        write_csv(udir / "two_scale.csv", ("eps", "error"), rows)
        worst = max(rep.values())
        self._log("verify-unfolding", [f"largest identity residual = {worst:.3e}"] +
                  [f"two-scale error at eps = {e:.6g}: {r:.6g}" for e, r in rows])
        return rep, rows

    def validate_ionic(self):
        from .errors import AssumptionViolated
        from .ionic import validate_assumptions

        i = self.cfg["ionic"]
        idir = self.out / "ionic"
        try:
            rep = validate_assumptions(self.cfg.params(), r=i["r"], box=tuple(i["box"]), seed=self.cfg.seed)
        except AssumptionViolated as exc:
            write_csv(idir / "assumptions.csv", ("name", "value"),
                      [("status", "violated"), ("condition", exc.condition), ("witness", exc.witness)])
            self._log("validate-ionic", [f"violated: {exc}"])
            raise
        write_csv(idir / "assumptions.csv", ("name", "value"), [("status", "ok")] + list(rep.rows()))
        self._log("validate-ionic", [f"{k} = {fmt(v)}" for k, v in rep.rows()])
        return rep

    STAGE_METHODS = {
        "homogenize": "homogenize",
        "simulate": "simulate",
        "dns": "dns",
        "converge": "converge",
        "verify-unfolding": "verify_unfolding",
        "validate-ionic": "validate_ionic",
    }

    def run_stage(self, name):
        try:
            return getattr(self, self.STAGE_METHODS[name])()
        finally:
            self.write_report()

    def run(self, stages=None):
        from .config import STAGES

        stages = self.cfg.stages if stages is None else stages
        for name in STAGES:
            if name in stages:
                self.run_stage(name)


def pipeline(cfg, out=None):
    """Run the configured stages; returns the ``Pipeline`` (report, tensors) on success."""
    p = Pipeline(cfg, out)
    p.run()
    return p


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="TOML configuration file")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory (overrides the config)")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="threads for the numerical libraries")
    parser = argparse.ArgumentParser(prog="bidomain-hom", parents=[common],
                                     description="Two-level homogenization of the cardiac bidomain model.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "homogenize": "effective tensors of the configured cells",
        "simulate": "homogenized bidomain run",
        "dns": "resolved microscopic run at scales.epsilon, scales.delta",
        "converge": "convergence study over scales.eps_list",
        "verify-unfolding": "unfolding identities and two-scale smoke test",
        "validate-ionic": "check the ionic model assumptions",
        "run": "all stages listed in the configuration",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    threads = getattr(args, "threads", None)
    if threads is not None:
        if threads < 1:
            print("error: --threads must be positive", file=sys.stderr)
            return 2
        for var in _THREAD_VARS:
            os.environ[var] = str(threads)

    from .config import load_config, loads_config
    from .errors import BidomainHomError, ConfigError

    try:
        cfg = load_config(args.config) if getattr(args, "config", None) else loads_config("")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = getattr(args, "out", None)
    try:
        p = Pipeline(cfg, out)
        if args.command == "run":
            p.run()
        else:
            p.run_stage(args.command)
    except BidomainHomError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    for title, lines in p.report:
        print(f"[{title}]")
        for line in lines:
            print(f"  {line}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
