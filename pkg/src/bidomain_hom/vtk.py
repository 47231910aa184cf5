"""Legacy ASCII VTK writer for scalar fields on structured point grids."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def write_structured_points(path, values, spacing, origin=None, name="field", title="bidomain_hom"):
    """Write one scalar point field in the legacy ``STRUCTURED_POINTS`` format.

    ``values`` has one entry per grid point, shape ``(n_1, ..., n_d)`` with
    ``d <= 3``; missing axes are padded to size 1.  Points are written with
    the first index running fastest, as the format requires.
    """
    values = np.asarray(values, dtype=float)
    d = values.ndim
    if not 1 <= d <= 3:
        raise ValueError("only 1, 2 or 3 dimensional grids can be written")
    dims = list(values.shape) + [1] * (3 - d)
    h = list(np.broadcast_to(np.asarray(spacing, dtype=float), (d,))) + [1.0] * (3 - d)
    o = [0.0] * 3 if origin is None else list(np.broadcast_to(np.asarray(origin, float), (d,))) + [0.0] * (3 - d)
    lines = [
        "# vtk DataFile Version 3.0",
        title,
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        "DIMENSIONS {} {} {}".format(*dims),
        "ORIGIN {} {} {}".format(*(f"{x:.17g}" for x in o)),
        "SPACING {} {} {}".format(*(f"{x:.17g}" for x in h)),
        f"POINT_DATA {values.size}",
        f"SCALARS {name} double 1",
        "LOOKUP_TABLE default",
    ]
    body = "\n".join(f"{x:.17g}" for x in values.ravel(order="F"))
    Path(path).write_text("\n".join(lines) + "\n" + body + "\n")


def read_structured_points(path):
    """Read a file written by :func:`write_structured_points`; returns ``(values, spacing, origin, name)``."""
    lines = Path(path).read_text().splitlines()
    header = {}
    k = 0
    while k < len(lines):
        parts = lines[k].split()
        if parts and parts[0] in ("DIMENSIONS", "ORIGIN", "SPACING", "SCALARS"):
            header[parts[0]] = parts[1:]
        if parts and parts[0] == "LOOKUP_TABLE":
            k += 1
            break
        k += 1
    dims = [int(x) for x in header["DIMENSIONS"]]
    data = np.array([float(x) for x in lines[k:] if x.strip()])
    values = data.reshape(dims, order="F")
    return (values, [float(x) for x in header["SPACING"]], [float(x) for x in header["ORIGIN"]],
            header["SCALARS"][0])
