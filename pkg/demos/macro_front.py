"""Homogenized bidomain response to a localized stimulus.

The macro model runs with the tensors of the canonical geometry on a 1D
strip (the channel makes the transverse tensor degenerate).  The
transmembrane potential is printed at a few points every half time unit.
"""

import numpy as np

from bidomain_hom.geometry import canonical_cells
from bidomain_hom.ionic import FhnParams
from bidomain_hom.macro_solver import MacroGrid, MacroSolver, Stimulus
from bidomain_hom.micro_solver import homogenized_tensors


def main():
    meso, micro = canonical_cells()
    tens = homogenized_tensors(meso, micro)
    Mi, Me, mu = tens["Mi"][:1, :1], tens["Me"][:1, :1], tens["mu_m"]
    print(f"Mi {Mi[0, 0]:.6f}  Me {Me[0, 0]:.6f}  mu_m {mu:g}")

    grid = MacroGrid((1.0,), (128,))
    solver = MacroSolver(grid, Mi, Me, mu, FhnParams(), 1e-2, Stimulus((0.0,), 0.25, 2.0, 0.0, 0.5))
    state = solver.initial_state(0.0, 0.0)
    probes = [0, 32, 64, 128]
    print("t     " + "  ".join(f"x={solver.nodes[k, 0]:.2f}" for k in probes))
    for k in range(1, 201):
        state = solver.step(state)
        if k % 50 == 0:
            print(f"{state.t:4.1f}  " + "  ".join(f"{state.v[j]:+.3f} " for j in probes))
    print(f"gauge: int u_e = {state.diagnostics['int_ue']:.1e}")


if __name__ == "__main__":
    main()
