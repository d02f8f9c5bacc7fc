"""Output artifacts: history CSV, density rasters, VTK volumes and
component-parameter snapshots.

Floats are written with ``repr`` (shortest round-tripping decimal), so
every text artifact parses back to the exact binary values.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np

from ..geometry import PARAMS_2D, PARAMS_3D, RegularizationParams, build_structure_tdf, design_dim

HISTORY_FIELDS = ("iteration", "compliance", "volume", "volume_fraction")
TIMING_FIELDS = ("t_tdf", "t_fea", "t_sen", "t_mma", "t_total")
SUMMARY_FIELDS = ("n_iter", "status", "c_obj", "c_post", "rel_error")


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


# ----------------------------------------------------------------------------
# history
# ----------------------------------------------------------------------------


def history_text(result, timings: bool = True) -> str:
    """CSV text: one row per iteration, then a blank line and a summary block.

    With ``timings=False`` the wall-clock columns are left out so identical
    runs give byte-identical files.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    fields = HISTORY_FIELDS + (TIMING_FIELDS if timings else ())
    w.writerow(fields)
    for rec in result.records:
        w.writerow([_fmt(getattr(rec, f)) for f in fields])
    w.writerow([])
    w.writerow(SUMMARY_FIELDS)
    w.writerow([_fmt(v) for v in (result.n_iter, result.status, result.c_obj, result.c_post,
                                  result.rel_error)])
    return buf.getvalue()


def write_history(result, path, timings: bool = True) -> Path:
    path = Path(path)
    path.write_text(history_text(result, timings), encoding="utf-8")
    return path


def write_timings(result, path) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("iteration",) + TIMING_FIELDS)
    for rec in result.records:
        w.writerow([rec.iteration] + [_fmt(getattr(rec, f)) for f in TIMING_FIELDS])
    path = Path(path)
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def read_history(path) -> tuple[list[dict], dict]:
    """Iteration rows and the summary row of a history file (as strings)."""
    text = Path(path).read_text(encoding="utf-8")
    head, _, tail = text.partition("\n\n")
    rows = list(csv.DictReader(io.StringIO(head + "\n")))
    summary = next(csv.DictReader(io.StringIO(tail)), {})
    return rows, summary


def write_study(rows, path) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("ratio", "n_iter", "converged", "c_obj", "c_post", "rel_error"))
    for r in rows:
        w.writerow([r.ratio, r.n_iter, int(r.converged), _fmt(r.c_obj), _fmt(r.c_post),
                    _fmt(r.rel_error)])
    path = Path(path)
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


# ----------------------------------------------------------------------------
# density fields
# ----------------------------------------------------------------------------


def density_field(design, grid, params: RegularizationParams, load_case=None) -> np.ndarray:
    """Nodal H(phi_s) on the background grid (fixed regions applied)."""
    from ..fea import apply_fixed_regions

    tdf = build_structure_tdf(np.asarray(design, dtype=float), grid, params)
    if load_case is not None:
        tdf = apply_fixed_regions(tdf, load_case)
    return tdf.heaviside()


def density_pixels(H: np.ndarray, grid, alpha_min: float) -> np.ndarray:
    """uint8 image, row 0 at the top (largest y); solid is white."""
    if grid.dim != 2:
        raise ValueError("rasters are 2D; use the VTK export for 3D fields")
    img = grid.nodal_view(H)[::-1]
    scaled = 255.0 * (img - alpha_min) / (1.0 - alpha_min)
    return np.clip(np.rint(scaled), 0, 255).astype(np.uint8)


def export_density_raster(design, grid, params: RegularizationParams, path, load_case=None) -> Path:
    """Write a grayscale PGM (``.pgm``) or PNG (any other suffix)."""
    path = Path(path)
    pix = density_pixels(density_field(design, grid, params, load_case), grid, params.alpha_min)
    if path.suffix.lower() == ".pgm":
        h, w = pix.shape
        path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())
    else:
        from PIL import Image

        Image.fromarray(pix, mode="L").save(path, format="PNG")
    return path


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM file")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError("only 8-bit PGM files are supported")
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def export_vtk(design, grid, params: RegularizationParams, path, load_case=None,
               name: str = "density") -> Path:
    """Legacy ASCII VTK structured-points file of nodal H(phi_s).

    2D grids are written as a single z-layer.
    """
    H = density_field(design, grid, params, load_case)
    return write_vtk_field(H, grid, path, name)


def write_vtk_field(values: np.ndarray, grid, path, name: str = "density") -> Path:
    dims = list(grid.node_shape) + [1] * (3 - grid.dim)
    spacing = list(grid.spacing) + [1.0] * (3 - grid.dim)
    lines = [
        "# vtk DataFile Version 3.0",
        "multi-resolution component design",
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        "DIMENSIONS {} {} {}".format(*dims),
        "ORIGIN 0 0 0",
        "SPACING {} {} {}".format(*(repr(float(s)) for s in spacing)),
        f"POINT_DATA {grid.n_nodes}",
        f"SCALARS {name} double 1",
        "LOOKUP_TABLE default",
    ]
    # x varies fastest, matching the node numbering
    body = "\n".join(repr(float(v)) for v in np.asarray(values, dtype=float))
    path = Path(path)
    path.write_text("\n".join(lines) + "\n" + body + "\n", encoding="ascii")
    return path


def read_vtk_field(path) -> tuple[tuple, np.ndarray]:
    lines = Path(path).read_text(encoding="ascii").splitlines()
    dims = tuple(int(v) for v in lines[4].split()[1:])
    start = lines.index("LOOKUP_TABLE default") + 1
    return dims, np.array([float(v) for v in lines[start:] if v.strip()])


# ----------------------------------------------------------------------------
# component snapshots
# ----------------------------------------------------------------------------


def components_text(snapshots) -> str:
    """``snapshots`` is a list of ``(iteration, design)``; each block is

        # iteration <k>
        id x0 y0 a t1 t2 theta
        0 ...
    """
    out = ["# component parameters, one block per snapshot"]
    for it, design in snapshots:
        design = np.atleast_2d(np.asarray(design, dtype=float))
        names = PARAMS_2D if design_dim(design) == 2 else PARAMS_3D
        out.append(f"# iteration {int(it)}")
        out.append("id " + " ".join(names))
        for i, row in enumerate(design):
            out.append(f"{i} " + " ".join(repr(float(v)) for v in row))
    return "\n".join(out) + "\n"


def export_components(snapshots, path) -> Path:
    path = Path(path)
    path.write_text(components_text(snapshots), encoding="utf-8")
    return path


def parse_components(text: str) -> list:
    """Inverse of :func:`components_text`: ``[(iteration, design), ...]``."""
    snaps, rows, it = [], [], None
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("# iteration"):
            if it is not None:
                snaps.append((it, _rows_to_design(rows)))
            it, rows = int(line.split()[2]), []
        elif line.startswith("#") or line.startswith("id "):
            continue
        else:
            if it is None:
                raise ValueError("component row before any '# iteration' header")
            fields = line.split()
            if int(fields[0]) != len(rows):
                raise ValueError(f"component ids out of order at {fields[0]}")
            rows.append([float(v) for v in fields[1:]])
    if it is not None:
        snaps.append((it, _rows_to_design(rows)))
    return snaps


def _rows_to_design(rows) -> np.ndarray:
    design = np.array(rows, dtype=float)
    if design.ndim != 2 or design.shape[1] not in (6, 9):
        raise ValueError("component rows must have 6 or 9 parameters")
    return design


def read_components(path) -> list:
    return parse_components(Path(path).read_text(encoding="utf-8"))
