import functools
import logging
import os
import time
from typing import Dict, List

import numpy as np

from errors import SolverError, SolverSuiteError
from export import (export_fields, export_sample_snapshots, nodal_pressure, read_probes_csv, write_comparison_csv,
                    write_ensemble_step_history, write_gnuplot_scripts, write_mesh_text, write_mode_norms, write_pdfs,
                    write_probes_csv, write_sample_manifest, write_step_history, write_summary,
                    write_triple_product_pattern, write_viscosity_csv)
from mesh_fem import build_boundary_data, build_dofmap, generate_obstacle_mesh
from postprocess import (ProbeStatistics, coefficient_norm_series, compare_report, probe_coefficients, probe_pdf,
                         probe_values, statistics_from_gpc, statistics_from_samples, surrogate_samples)
from random_field import build_basis, build_viscosity
from run_config import RunConfig, save_config
from sampling import (EnsembleResult, build_sparse_grid, draw_mc, project_pseudospectral, run_ensemble,
                      sample_moments)
from sg_core import SolverSettings, build_sg_problem, build_sg_schedule, sg_run
from stepper_det import StepperConfig, build_flow_problem, run
from utils import format_comparison_table, format_run_summary, step_statistics

logger = logging.getLogger(__name__)

REPORT_METHODS = ("sg", "sc", "mc")


def handle_errors(handler):
    """Turn library errors into a logged message, a one-line diagnostic and exit status 1."""
    @functools.wraps(handler)
    def wrapper(context: Dict) -> int:
        try:
            return handler(context)
        except SolverSuiteError as e:
            logger.error(f"{handler.__name__} failed: {e}")
            print(f"❌ {type(e).__name__}: {e}")
            return 1
    return wrapper


def setup_problem(cfg: RunConfig) -> Dict:
    """Mesh, boundary data, lognormal viscosity and the mean-viscosity flow problem."""
    mesh = generate_obstacle_mesh(cfg.mesh.channel_length, cfg.mesh.channel_halfheight, cfg.mesh.obstacle_box,
                                  cfg.mesh.refinement)
    dofmap = build_dofmap(mesh)
    boundary = build_boundary_data(mesh, dofmap, cfg.mesh.ramp_rate, cfg.mesh.inflow_amplitude)
    f = cfg.field
    viscosity = build_viscosity(mesh, f.mean_viscosity, f.cov, f.correlation_length_x, f.correlation_length_y,
                                f.m_xi, f.p_xi, f.kl_terms_1d)
    flow = build_flow_problem(mesh, dofmap, boundary, viscosity.mean_field)
    return {"mesh": mesh, "dofmap": dofmap, "boundary": boundary, "viscosity": viscosity, "flow": flow,
            "basis": build_basis(f.m_xi, f.p_xi)}


def stepper_config(cfg: RunConfig) -> StepperConfig:
    s = cfg.stepper
    return StepperConfig(tolerance=s.tolerance, initial_step=s.initial_step, reject_factor=s.reject_factor,
                         averaging_period=s.averaging_period, final_time=s.final_time, barriers=cfg.barriers,
                         max_rejections=s.max_rejections, zero_error_growth=s.zero_error_growth,
                         max_step=s.max_step)


def solver_settings(cfg: RunConfig) -> SolverSettings:
    s = cfg.solver
    return SolverSettings(tolerance=s.gmres_tolerance, max_iter=s.gmres_max_iter, restart=s.restart,
                          block_solver=s.block_solver, sweeps=s.smoother_sweeps,
                          chebyshev_iterations=s.chebyshev_iterations)


def _prepare(context: Dict) -> Dict:
    cfg: RunConfig = context["config"]
    os.makedirs(cfg.output.directory, exist_ok=True)
    save_config(cfg)
    print(f"▶ {cfg.mode} run, writing to {cfg.output.directory}")
    problem = setup_problem(cfg)
    write_mesh_text(_out(cfg, "mesh.txt"), problem["mesh"])
    return problem


def _out(cfg: RunConfig, name: str) -> str:
    return os.path.join(cfg.output.directory, name)


def _formats(cfg: RunConfig) -> List[str]:
    return ["csv", "vtk"] if cfg.output.vtk else ["csv"]


def _finish(cfg: RunConfig, summary: Dict, step_csv: str = None, mode_csv: str = None, n_xi: int = 0,
            pdf_csv: str = None, pdf_keys=()) -> int:
    if cfg.output.gnuplot:
        write_gnuplot_scripts(cfg.output.directory, step_csv, mode_csv, n_xi, pdf_csv, pdf_keys)
    write_summary(_out(cfg, "summary.json"), summary)
    print(format_run_summary(summary))
    print(f"✅ Finished {cfg.mode} run in {cfg.output.directory}")
    return 0


def _pdfs_from_values(values: np.ndarray, barriers: List[float], source: str) -> List:
    """values: (n, n_barriers, n_probes, 2) samples."""
    pdfs = []
    for b, t in enumerate(barriers):
        for i in range(values.shape[2]):
            for c in range(2):
                column = values[:, b, i, c]
                pdfs.append(probe_pdf(column[~np.isnan(column)], source, time=t, probe=i, component=c))
    return pdfs


def _pdfs_from_coefficients(coefficients: Dict[float, np.ndarray], mesh, probes, basis, n: int, seed: int,
                            source: str) -> List:
    pdfs = []
    for t in sorted(coefficients):
        at_probes = probe_coefficients(mesh, probes, coefficients[t])        # (n_probes, 2, n_xi)
        for i in range(at_probes.shape[0]):
            for c in range(2):
                values = surrogate_samples(at_probes[i, c], basis, n, seed)
                pdfs.append(probe_pdf(values, source, time=t, probe=i, component=c))
    return pdfs


def _pdf_keys(pdfs) -> List[tuple]:
    return [(p.time, p.probe, p.component) for p in pdfs]


@handle_errors
def run_det_command(context: Dict) -> int:
    """Handle run-det: adaptive deterministic run with the mean viscosity field."""
    cfg: RunConfig = context["config"]
    started = time.perf_counter()
    problem = _prepare(context)
    mesh, flow = problem["mesh"], problem["flow"]

    result = run(flow, stepper_config(cfg))
    step_csv = write_step_history(_out(cfg, "step_history.csv"), result.history)
    for t, snap in sorted(result.snapshots.items()):
        export_fields({"velocity": snap.u, "pressure": nodal_pressure(mesh, snap.p)}, mesh, cfg.output.directory,
                      f"det_t{t:g}", _formats(cfg))

    barriers = sorted(result.snapshots)
    values = probe_values(mesh, cfg.probes, np.stack([result.snapshots[t].u for t in barriers]))
    write_probes_csv(_out(cfg, "probes.csv"),
                     ProbeStatistics("det", barriers, values, np.zeros_like(values), n_samples=1), cfg.probes)

    summary = {"mode": "det", "output_directory": cfg.output.directory, "mesh": mesh.describe(),
               "steps": step_statistics(result.history), "barriers": barriers,
               "wall_clock": time.perf_counter() - started}
    return _finish(cfg, summary, step_csv=step_csv)


@handle_errors
def run_sg_command(context: Dict) -> int:
    """Handle run-sg: schedule from a deterministic run, then the coupled gPC evolution."""
    cfg: RunConfig = context["config"]
    started = time.perf_counter()
    problem = _prepare(context)
    mesh, flow, viscosity, basis = problem["mesh"], problem["flow"], problem["viscosity"], problem["basis"]
    stepper = stepper_config(cfg)

    logger.info("Deterministic run for the SG time-step schedule")
    det = run(flow, stepper)
    write_step_history(_out(cfg, "det_step_history.csv"), det.history)
    schedule = build_sg_schedule(det.history, basis.size, list(stepper.barriers) + [stepper.final_time])

    sgp = build_sg_problem(flow, viscosity, basis, solver_settings(cfg))
    write_viscosity_csv(_out(cfg, "viscosity_modes.csv"), mesh, viscosity)
    write_triple_product_pattern(_out(cfg, "triple_products.csv"), sgp.H)
    result = sg_run(sgp, schedule, stepper.averaging_period)

    step_csv = write_step_history(_out(cfg, "step_history.csv"), result.history)
    series = coefficient_norm_series(result)
    mode_csv = write_mode_norms(_out(cfg, "mode_norms.csv"), series)
    for t, snap in sorted(result.snapshots.items()):
        P = nodal_pressure(mesh, snap.p)
        fields = {}
        for k in range(basis.size):
            fields[f"u_{k + 1}"] = snap.u[:, k]
            fields[f"p_{k + 1}"] = P[:, k]
        export_fields(fields, mesh, cfg.output.directory, f"sg_coefficients_t{t:g}", ["csv"])
        moments = {"mean_velocity": snap.u[:, 0], "variance_velocity": np.sum(snap.u[:, 1:] ** 2, axis=1),
                   "mean_pressure": P[:, 0], "variance_pressure": np.sum(P[:, 1:] ** 2, axis=1)}
        export_fields(moments, mesh, cfg.output.directory, f"sg_moments_t{t:g}", _formats(cfg))

    snapshots = {t: s.u for t, s in result.snapshots.items()}
    write_probes_csv(_out(cfg, "probes.csv"), statistics_from_gpc("sg", mesh, cfg.probes, snapshots), cfg.probes)
    pdfs = _pdfs_from_coefficients(snapshots, mesh, cfg.probes, basis, cfg.sampling.surrogate_samples,
                                   cfg.sampling.seed, "sg")
    pdf_csv = write_pdfs(_out(cfg, "pdfs.csv"), pdfs)

    summary = {"mode": "sg", "output_directory": cfg.output.directory, "mesh": mesh.describe(),
               "n_xi": basis.size, "n_nu": viscosity.n_nu, "steps": step_statistics(result.history),
               "schedule_steps": len(schedule.landings), "deterministic_steps": step_statistics(det.history),
               "max_divergence": max(result.divergence) if result.divergence else 0.0,
               "barriers": sorted(result.snapshots), "wall_clock": time.perf_counter() - started}
    return _finish(cfg, summary, step_csv, mode_csv, basis.size, pdf_csv, _pdf_keys(pdfs))


def _run_sampling(context: Dict, samples, problem: Dict) -> EnsembleResult:
    cfg: RunConfig = context["config"]
    stepper = stepper_config(cfg)
    landings = None
    if cfg.sampling.common_schedule:
        det = run(problem["flow"], stepper)
        landings = det.accepted_times()[1:]
        logger.info(f"Sampling on the common mean-flow schedule ({len(landings)} steps)")
    ensemble = run_ensemble(samples, problem["flow"], problem["viscosity"], stepper, cfg.sampling.threads, landings)
    write_sample_manifest(_out(cfg, "samples.csv"), samples, ensemble.errors, ensemble.wall_clock)
    write_ensemble_step_history(_out(cfg, "step_history.csv"), ensemble.histories)
    export_sample_snapshots(ensemble, problem["mesh"], cfg.output.directory, cfg.mode)
    return ensemble


def _sampling_summary(cfg: RunConfig, problem: Dict, ensemble: EnsembleResult, started: float) -> Dict:
    histories = [h for h in ensemble.histories if h]
    return {"mode": cfg.mode, "output_directory": cfg.output.directory, "mesh": problem["mesh"].describe(),
            "samples": len(ensemble.samples), "failed_samples": int((~ensemble.succeeded).sum()),
            "sample_wall_clock": ensemble.wall_clock, "barriers": ensemble.barriers,
            "sample_steps": [step_statistics(h)["accepted"] for h in histories],
            "wall_clock": time.perf_counter() - started}


@handle_errors
def run_mc_command(context: Dict) -> int:
    """Handle run-mc: independent deterministic runs at Gaussian sample points."""
    cfg: RunConfig = context["config"]
    started = time.perf_counter()
    problem = _prepare(context)
    mesh = problem["mesh"]
    samples = draw_mc(cfg.sampling.n_mc, cfg.field.m_xi, cfg.sampling.seed)
    ensemble = _run_sampling(context, samples, problem)

    for b, t in enumerate(ensemble.barriers):
        moments = sample_moments(ensemble.velocity[:, b])
        export_fields({"mean_velocity": moments.mean, "variance_velocity": moments.variance}, mesh,
                      cfg.output.directory, f"mc_moments_t{t:g}", _formats(cfg))
    stats = statistics_from_samples("mc", mesh, cfg.probes, ensemble)
    write_probes_csv(_out(cfg, "probes.csv"), stats, cfg.probes)
    pdfs = _pdfs_from_values(probe_values(mesh, cfg.probes, ensemble.velocity), ensemble.barriers, "mc")
    pdf_csv = write_pdfs(_out(cfg, "pdfs.csv"), pdfs)

    summary = _sampling_summary(cfg, problem, ensemble, started)
    summary["seed"] = cfg.sampling.seed
    return _finish(cfg, summary, pdf_csv=pdf_csv, pdf_keys=_pdf_keys(pdfs))


@handle_errors
def run_sc_command(context: Dict) -> int:
    """Handle run-sc: Smolyak collocation with pseudo-spectral projection onto the gPC basis."""
    cfg: RunConfig = context["config"]
    started = time.perf_counter()
    problem = _prepare(context)
    mesh, basis = problem["mesh"], problem["basis"]
    samples = build_sparse_grid(cfg.field.m_xi, cfg.smolyak_level)
    ensemble = _run_sampling(context, samples, problem)
    if not ensemble.succeeded.all():
        raise SolverError(f"{int((~ensemble.succeeded).sum())} collocation samples failed; projection needs all")

    coefficients = project_pseudospectral(ensemble.velocity, samples, basis)       # (n_barriers, n_u, n_xi)
    snapshots = {t: coefficients[b] for b, t in enumerate(ensemble.barriers)}
    for t, U in snapshots.items():
        export_fields({"mean_velocity": U[:, 0], "variance_velocity": np.sum(U[:, 1:] ** 2, axis=1)}, mesh,
                      cfg.output.directory, f"sc_moments_t{t:g}", _formats(cfg))
    write_probes_csv(_out(cfg, "probes.csv"), statistics_from_gpc("sc", mesh, cfg.probes, snapshots), cfg.probes)
    pdfs = _pdfs_from_coefficients(snapshots, mesh, cfg.probes, basis, cfg.sampling.surrogate_samples,
                                   cfg.sampling.seed, "sc")
    pdf_csv = write_pdfs(_out(cfg, "pdfs.csv"), pdfs)

    summary = _sampling_summary(cfg, problem, ensemble, started)
    summary["level"] = cfg.smolyak_level
    return _finish(cfg, summary, pdf_csv=pdf_csv, pdf_keys=_pdf_keys(pdfs))


@handle_errors
def report_command(context: Dict) -> int:
    """Handle report: compare the probes.csv of finished sg/sc/mc runs."""
    cfg: RunConfig = context["config"]
    inputs = {m: d for m, d in context.get("inputs", {}).items() if d}
    if "sg" not in inputs:
        print("❌ report needs at least --sg <run directory>")
        return 2
    paths = {m: os.path.join(d, "probes.csv") for m, d in inputs.items()}
    missing = [p for p in paths.values() if not os.path.isfile(p)]
    if missing:
        print(f"❌ No probe table at {', '.join(missing)}")
        return 2
    results = {m: read_probes_csv(p, m) for m, p in paths.items()}
    rows = compare_report(results, reference="sg")

    os.makedirs(cfg.output.directory, exist_ok=True)
    path = write_comparison_csv(_out(cfg, "comparison.csv"), rows)
    print(format_comparison_table(rows))
    print(f"✅ Comparison of {', '.join(results)} written to {path}")
    return 0
