"""File outputs: CSV tables, legacy-VTK fields, mesh text, gnuplot scripts and the run summary."""
import json
import logging
import os
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from errors import ContractViolation
from mesh_fem import Mesh
from postprocess import COMPONENTS, PdfEstimate, ProbeStatistics
from random_field import LognormalViscosity, TripleProductTensor
from sampling import EnsembleResult, SampleSet
from stepper_det import StepRecord

logger = logging.getLogger(__name__)

FMT = "%.17g"
STEP_HISTORY_COLUMNS = ("step", "t", "k", "accepted", "err_norm", "gmres_iters", "averaged")

# Q2 element in tensor order split into four bilinear cells for viewers
_SUB_QUADS = np.array([[0, 1, 4, 3], [1, 2, 5, 4], [3, 4, 7, 6], [4, 5, 8, 7]])
VTK_QUAD = 9


def _write_table(path: str, columns: Sequence[str], data: np.ndarray):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    np.savetxt(path, np.atleast_2d(data), fmt=FMT, delimiter=",", header=",".join(columns), comments="")


def _read_table(path: str) -> Dict[str, np.ndarray]:
    with open(path, "r") as f:
        columns = f.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.size == 0:
        data = np.empty((0, len(columns)))
    return {name: data[:, i] for i, name in enumerate(columns)}


def write_step_history(path: str, history: Iterable[StepRecord]) -> str:
    rows = [(r.step, r.t, r.k, int(r.accepted), r.error_norm, r.gmres_iterations, int(r.averaged)) for r in history]
    _write_table(path, STEP_HISTORY_COLUMNS, np.array(rows, dtype=float).reshape(-1, len(STEP_HISTORY_COLUMNS)))
    return path


def write_ensemble_step_history(path: str, histories: Sequence[Sequence[StepRecord]]) -> str:
    """One step history per sample, stacked under a leading sample column; failed samples have no rows."""
    rows = [(q, r.step, r.t, r.k, int(r.accepted), r.error_norm, r.gmres_iterations, int(r.averaged))
            for q, history in enumerate(histories) for r in history]
    columns = ("sample",) + STEP_HISTORY_COLUMNS
    _write_table(path, columns, np.array(rows, dtype=float).reshape(-1, len(columns)))
    return path


def read_step_history(path: str) -> List[StepRecord]:
    table = _read_table(path)
    return [StepRecord(step=int(s), t=float(t), k=float(k), accepted=bool(a), error_norm=float(e),
                       gmres_iterations=int(g), averaged=bool(v))
            for s, t, k, a, e, g, v in zip(*(table[c] for c in STEP_HISTORY_COLUMNS))]


def nodal_pressure(mesh: Mesh, p: np.ndarray) -> np.ndarray:
    """Bilinear Q1 pressure evaluated at every Q2 node."""
    p = np.asarray(p, dtype=float)
    if p.shape[0] != len(mesh.vertices):
        raise ContractViolation(f"pressure has {p.shape[0]} entries, mesh has {len(mesh.vertices)} vertices")
    out = np.empty((mesh.n_nodes,) + p.shape[1:])
    corner = p[mesh.element_vertices]             # (n_el, 4, ...)
    for b in range(3):
        for a in range(3):
            s, t = a / 2.0, b / 2.0
            w = np.array([(1 - s) * (1 - t), s * (1 - t), (1 - s) * t, s * t])
            out[mesh.elements[:, 3 * b + a]] = np.tensordot(corner, w, axes=([1], [0]))
    return out


def _split_fields(mesh: Mesh, fields: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """Nodal scalars pass through; velocity-sized vectors become (n_nodes, 2)."""
    n = mesh.n_nodes
    out = {}
    for name, values in fields.items():
        values = np.asarray(values, dtype=float)
        if values.shape == (n,):
            out[name] = values
        elif values.shape == (2 * n,):
            out[name] = np.column_stack([values[:n], values[n:]])
        else:
            raise ContractViolation(f"field {name!r} has shape {values.shape}; expected ({n},) or ({2 * n},)")
    return out


def write_fields_csv(path: str, mesh: Mesh, fields: Dict[str, np.ndarray]) -> str:
    split = _split_fields(mesh, fields)
    columns, data = ["x", "y"], [mesh.nodes[:, 0], mesh.nodes[:, 1]]
    for name, values in split.items():
        if values.ndim == 1:
            columns.append(name)
            data.append(values)
        else:
            columns += [f"{name}_x", f"{name}_y"]
            data += [values[:, 0], values[:, 1]]
    _write_table(path, columns, np.column_stack(data))
    return path


def read_fields_csv(path: str) -> Dict[str, np.ndarray]:
    """Inverse of write_fields_csv; `name_x`/`name_y` pairs come back component-blocked."""
    table = _read_table(path)
    fields = {}
    for name, values in table.items():
        if name in ("x", "y"):
            continue
        base = name[:-2]
        if name.endswith("_x") and f"{base}_y" in table:
            fields[base] = np.concatenate([values, table[f"{base}_y"]])
        elif name.endswith("_y") and f"{base}_x" in table:
            continue
        else:
            fields[name] = values
    return fields


def write_vtk(path: str, mesh: Mesh, fields: Dict[str, np.ndarray], title: str = "sgns fields") -> str:
    """Legacy ASCII unstructured grid with nodal point data."""
    split = _split_fields(mesh, fields)
    cells = mesh.elements[:, _SUB_QUADS].reshape(-1, 4)
    n = mesh.n_nodes
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        f.write(f"# vtk DataFile Version 3.0\n{title}\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        f.write(f"POINTS {n} double\n")
        np.savetxt(f, np.column_stack([mesh.nodes, np.zeros(n)]), fmt=FMT)
        f.write(f"CELLS {len(cells)} {5 * len(cells)}\n")
        np.savetxt(f, np.column_stack([np.full(len(cells), 4), cells]), fmt="%d")
        f.write(f"CELL_TYPES {len(cells)}\n")
        np.savetxt(f, np.full(len(cells), VTK_QUAD), fmt="%d")
        f.write(f"POINT_DATA {n}\n")
        for name, values in split.items():
            if values.ndim == 1:
                f.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                np.savetxt(f, values, fmt=FMT)
            else:
                f.write(f"VECTORS {name} double\n")
                np.savetxt(f, np.column_stack([values, np.zeros(n)]), fmt=FMT)
    return path


def read_vtk(path: str) -> Dict[str, np.ndarray]:
    """Point data of a file written by write_vtk; vectors come back component-blocked."""
    with open(path, "r") as f:
        lines = f.read().splitlines()
    start = next((i for i, line in enumerate(lines) if line.startswith("POINT_DATA")), None)
    if start is None:
        return {}
    n = int(lines[start].split()[1])
    fields, i = {}, start + 1
    while i < len(lines):
        header = lines[i].split()
        if not header:
            i += 1
        elif header[0] == "SCALARS":
            fields[header[1]] = np.array([float(v) for v in lines[i + 2:i + 2 + n]])
            i += 2 + n
        elif header[0] == "VECTORS":
            rows = np.array([[float(v) for v in line.split()] for line in lines[i + 1:i + 1 + n]])
            fields[header[1]] = np.concatenate([rows[:, 0], rows[:, 1]])
            i += 1 + n
        else:
            raise ContractViolation(f"unexpected VTK section {header[0]!r} in {path}")
    return fields


def export_fields(fields: Dict[str, np.ndarray], mesh: Mesh, directory: str, name: str,
                  formats: Sequence[str] = ("csv", "vtk")) -> List[str]:
    paths = []
    if "csv" in formats:
        paths.append(write_fields_csv(os.path.join(directory, f"{name}.csv"), mesh, fields))
    if "vtk" in formats:
        paths.append(write_vtk(os.path.join(directory, f"{name}.vtk"), mesh, fields, title=name))
    logger.debug(f"Exported {sorted(fields)} to {paths}")
    return paths


def export_sample_snapshots(ensemble: EnsembleResult, mesh: Mesh, directory: str, prefix: str) -> List[str]:
    """Velocity and nodal pressure of every sample, one CSV per barrier; failed samples are NaN."""
    paths = []
    for b, t in enumerate(ensemble.barriers):
        fields = {}
        for q in range(len(ensemble.samples)):
            fields[f"velocity_{q}"] = ensemble.velocity[q, b]
            fields[f"pressure_{q}"] = nodal_pressure(mesh, ensemble.pressure[q, b])
        paths += export_fields(fields, mesh, directory, f"{prefix}_samples_t{t:g}", ["csv"])
    return paths


def write_mesh_text(path: str, mesh: Mesh) -> str:
    """Nodes, Q2 element connectivity, Q1 vertices and tagged boundary edges."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        f.write(f"# spacing {mesh.spacing!r} refinement {mesh.refinement}\n")
        f.write(f"NODES {mesh.n_nodes}\n")
        np.savetxt(f, mesh.nodes, fmt=FMT)
        f.write(f"ELEMENTS {mesh.n_elements}\n")
        np.savetxt(f, mesh.elements, fmt="%d")
        f.write(f"VERTICES {len(mesh.vertices)}\n")
        np.savetxt(f, mesh.vertices, fmt="%d")
        f.write(f"BOUNDARY {len(mesh.boundary_edges)}\n")
        np.savetxt(f, np.column_stack([mesh.boundary_edges, mesh.boundary_tags]), fmt="%d")
    return path


def write_viscosity_csv(path: str, mesh: Mesh, viscosity: LognormalViscosity) -> str:
    columns = ["x", "y"] + [f"nu_{l + 1}" for l in range(viscosity.n_nu)]
    _write_table(path, columns, np.column_stack([mesh.nodes, viscosity.coefficients.T]))
    return path


def write_triple_product_pattern(path: str, H: TripleProductTensor) -> str:
    """Nonzero entries of every H_l as (l, j, k, value), 1-based mode numbers."""
    rows = []
    for l in range(H.n_hat):
        block = H[l].tocoo()
        rows += [(l + 1, j + 1, k + 1, v) for j, k, v in zip(block.row, block.col, block.data)]
    _write_table(path, ("l", "j", "k", "value"), np.array(rows, dtype=float).reshape(-1, 4))
    return path


def write_sample_manifest(path: str, samples: SampleSet, errors: Optional[Sequence[Optional[str]]] = None,
                          wall_clock: Optional[Sequence[float]] = None) -> str:
    n = len(samples)
    failed = np.zeros(n) if errors is None else np.array([e is not None for e in errors], dtype=float)
    seconds = np.full(n, np.nan) if wall_clock is None else np.asarray(wall_clock, dtype=float)
    seed = np.full(n, np.nan if samples.seed is None else samples.seed)
    columns = ["sample"] + [f"xi_{i + 1}" for i in range(samples.m)] + ["weight", "seed", "failed", "seconds"]
    data = np.column_stack([np.arange(n), samples.points, samples.weights, seed, failed, seconds])
    _write_table(path, columns, data)
    return path


def write_probes_csv(path: str, stats: ProbeStatistics, probes: Sequence[Sequence[float]]) -> str:
    rows = []
    for b, t in enumerate(stats.barriers):
        for i, (x, y) in enumerate(probes):
            for c in range(2):
                rows.append((t, i, x, y, c, stats.mean[b, i, c], stats.variance[b, i, c], stats.n_samples))
    _write_table(path, ("barrier", "probe", "x", "y", "component", "mean", "variance", "n_samples"),
                 np.array(rows, dtype=float).reshape(-1, 8))
    return path


def read_probes_csv(path: str, method: str) -> ProbeStatistics:
    table = _read_table(path)
    barriers = sorted(set(table["barrier"].tolist()))
    n_probes = int(table["probe"].max()) + 1 if len(table["probe"]) else 0
    mean = np.full((len(barriers), n_probes, 2), np.nan)
    variance = np.full_like(mean, np.nan)
    for t, i, c, mu, var in zip(table["barrier"], table["probe"], table["component"], table["mean"], table["variance"]):
        b = barriers.index(t)
        mean[b, int(i), int(c)], variance[b, int(i), int(c)] = mu, var
    n_samples = int(table["n_samples"][0]) if len(table["n_samples"]) else 0
    return ProbeStatistics(method=method, barriers=barriers, mean=mean, variance=variance, n_samples=n_samples)


def write_mode_norms(path: str, series: Dict[str, np.ndarray]) -> str:
    norms, norms_x = np.atleast_2d(series["norms"]), np.atleast_2d(series["norms_x"])
    n_xi = norms.shape[1]
    columns = ["t"] + [f"mode_{k + 1}" for k in range(n_xi)] + [f"mode_{k + 1}_x" for k in range(n_xi)]
    _write_table(path, columns, np.column_stack([series["times"], norms, norms_x]))
    return path


def write_pdfs(path: str, pdfs: Sequence[PdfEstimate]) -> str:
    rows = [(p.time, p.probe, p.component, x, d, p.bandwidth) for p in pdfs for x, d in zip(p.grid, p.density)]
    _write_table(path, ("barrier", "probe", "component", "value", "density", "bandwidth"),
                 np.array(rows, dtype=float).reshape(-1, 6))
    return path


def write_comparison_csv(path: str, rows: List[dict]) -> str:
    """Comparison rows as text CSV; method and component stay as labels."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    if not rows:
        open(path, "w").close()
        return path
    columns = list(rows[0])
    with open(path, "w") as f:
        f.write(",".join(columns) + "\n")
        for row in rows:
            f.write(",".join(FMT % v if isinstance(v, float) else str(v) for v in row.values()) + "\n")
    return path


_GNUPLOT_STEPS = """set datafile separator ','
set key autotitle columnhead
set logscale y
set xlabel 't'
set ylabel 'k'
set terminal pngcairo size 900,600
set output 'step_history.png'
plot '{csv}' using 2:($4 == 1 ? $3 : 1/0) with linespoints title 'accepted', \\
     '{csv}' using 2:($4 == 0 ? $3 : 1/0) with points pt 2 title 'rejected'
"""

_GNUPLOT_MODES = """set datafile separator ','
set logscale y
set xlabel 't'
set ylabel 'coefficient norm'
set terminal pngcairo size 900,600
set output 'mode_norms.png'
plot for [k=2:{last}] '{csv}' using 1:k with lines title columnhead(k)
"""

_GNUPLOT_PDF = """set datafile separator ','
set xlabel 'u'
set ylabel 'density'
set terminal pngcairo size 900,600
set output 'pdf_{tag}.png'
plot '{csv}' using ($1 == {barrier} && $2 == {probe} && $3 == {component} ? $4 : 1/0):5 with lines title '{title}'
"""


def write_gnuplot_scripts(directory: str, step_history: Optional[str] = None, mode_norms: Optional[str] = None,
                          n_xi: int = 0, pdfs: Optional[str] = None,
                          pdf_keys: Sequence[tuple] = ()) -> List[str]:
    """Standalone plot scripts that read the CSVs from the same directory."""
    scripts = []

    def emit(name, text):
        path = os.path.join(directory, name)
        with open(path, "w") as f:
            f.write(text)
        scripts.append(path)

    if step_history:
        emit("plot_step_history.gp", _GNUPLOT_STEPS.format(csv=os.path.basename(step_history)))
    if mode_norms and n_xi:
        emit("plot_mode_norms.gp", _GNUPLOT_MODES.format(csv=os.path.basename(mode_norms), last=n_xi + 1))
    for barrier, probe, component in pdf_keys if pdfs else ():
        tag = f"t{barrier:g}_p{probe}_{COMPONENTS[component]}"
        emit(f"plot_pdf_{tag}.gp", _GNUPLOT_PDF.format(csv=os.path.basename(pdfs), tag=tag, barrier=FMT % barrier,
                                                       probe=probe, component=component,
                                                       title=f"{COMPONENTS[component]} probe {probe} t={barrier:g}"))
    return scripts


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


def write_summary(path: str, summary: dict) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as f:
        json.dump(summary, f, indent=2, default=_jsonable)
    logger.info(f"Wrote run summary to {path}")
    return path
