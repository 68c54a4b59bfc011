import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from errors import ContractViolation
from export import (export_fields, export_sample_snapshots, nodal_pressure, read_fields_csv, read_probes_csv,
                    read_step_history, read_vtk, write_comparison_csv, write_ensemble_step_history,
                    write_gnuplot_scripts, write_mesh_text, write_probes_csv, write_sample_manifest,
                    write_step_history, write_summary, write_triple_product_pattern)
from mesh_fem import interpolate
from postprocess import ProbeStatistics
from random_field import build_basis, triple_products
from sampling import EnsembleResult, draw_mc
from stepper_det import StepRecord


def test_step_history_file(tmp_path):
    history = [StepRecord(0, 0.0, 1e-9, True, 0.0), StepRecord(1, 1e-9, 1e-9, True, 3.2e-7, 0),
               StepRecord(2, 0.1, 0.1, False, 1.0), StepRecord(2, 0.0123456789012345, 0.0123, True, 4e-5, 7, True)]
    path = write_step_history(str(tmp_path / "step_history.csv"), history)
    assert open(path).readline().strip() == "step,t,k,accepted,err_norm,gmres_iters,averaged"
    assert read_step_history(path) == history


def test_nodal_pressure_is_exact_for_bilinear_data(small_mesh):
    xy = small_mesh.vertex_coordinates
    p = 1.0 + xy[:, 0] - 2.0 * xy[:, 1] + 0.5 * xy[:, 0] * xy[:, 1]
    x, y = small_mesh.nodes[:, 0], small_mesh.nodes[:, 1]
    assert_allclose(nodal_pressure(small_mesh, p), 1.0 + x - 2.0 * y + 0.5 * x * y, atol=1e-12)
    with pytest.raises(ContractViolation):
        nodal_pressure(small_mesh, p[:-1])


def test_field_files_keep_full_precision(small_mesh, tmp_path):
    velocity = interpolate(small_mesh, lambda x, y: (np.sin(x) / 3.0, np.cos(y) / 7.0))
    pressure = small_mesh.nodes[:, 0] / 3.0
    csv_path, vtk_path = export_fields({"u": velocity, "p": pressure}, small_mesh, str(tmp_path), "det_t1")
    assert csv_path.endswith("det_t1.csv") and vtk_path.endswith("det_t1.vtk")

    from_csv = read_fields_csv(csv_path)
    assert np.array_equal(from_csv["u"], velocity)
    assert np.array_equal(from_csv["p"], pressure)
    from_vtk = read_vtk(vtk_path)
    assert np.array_equal(from_vtk["u"], velocity)
    assert np.array_equal(from_vtk["p"], pressure)


def test_vtk_cells(small_mesh, tmp_path):
    path = export_fields({"p": np.zeros(small_mesh.n_nodes)}, small_mesh, str(tmp_path), "zero", formats=("vtk",))[0]
    lines = open(path).read().splitlines()
    assert lines[0] == "# vtk DataFile Version 3.0"
    assert f"CELLS {4 * small_mesh.n_elements} {20 * small_mesh.n_elements}" in lines
    types = lines.index(f"CELL_TYPES {4 * small_mesh.n_elements}")
    assert lines[types + 1] == "9"


def test_field_shape_is_checked(small_mesh, tmp_path):
    with pytest.raises(ContractViolation):
        export_fields({"bad": np.zeros(5)}, small_mesh, str(tmp_path), "bad")


def test_mesh_text(small_mesh, tmp_path):
    text = open(write_mesh_text(str(tmp_path / "mesh.txt"), small_mesh)).read()
    assert f"NODES {small_mesh.n_nodes}" in text
    assert f"ELEMENTS {small_mesh.n_elements}" in text
    assert f"BOUNDARY {len(small_mesh.boundary_edges)}" in text


def test_triple_product_pattern(tmp_path):
    H = triple_products(build_basis(2, 2), build_basis(2, 1))
    path = write_triple_product_pattern(str(tmp_path / "triple_products.csv"), H)
    rows = np.loadtxt(path, delimiter=",", skiprows=1)
    assert_allclose(rows[:3], [[1, 1, 1, 1.0], [1, 2, 2, 1.0], [1, 3, 3, 1.0]])
    assert len(rows) == sum(m.nnz for m in H.matrices)
    assert rows[:, 0].max() <= H.n_hat


def test_sample_manifest(tmp_path):
    samples = draw_mc(4, 2, seed=5)
    path = write_sample_manifest(str(tmp_path / "samples.csv"), samples, errors=[None, "boom", None, None],
                                 wall_clock=[1.0, 0.5, 1.5, 2.0])
    table = np.loadtxt(path, delimiter=",", skiprows=1)
    assert open(path).readline().strip() == "sample,xi_1,xi_2,weight,seed,failed,seconds"
    assert_allclose(table[:, 1:3], samples.points, rtol=0)
    assert table[:, 5].tolist() == [0.0, 1.0, 0.0, 0.0]
    assert np.all(table[:, 4] == 5)


def test_probe_table_feeds_the_report(tmp_path):
    mean = np.arange(12.0).reshape(2, 3, 2) / 7.0
    stats = ProbeStatistics(method="mc", barriers=[1.0, 2.0], mean=mean, variance=mean ** 2, n_samples=200)
    probes = [[4.01, -0.4339], [4.01, 0.4339], [3.6436, 0.0]]
    path = write_probes_csv(str(tmp_path / "probes.csv"), stats, probes)
    loaded = read_probes_csv(path, "mc")
    assert loaded.barriers == [1.0, 2.0]
    assert np.array_equal(loaded.mean, mean)
    assert np.array_equal(loaded.variance, mean ** 2)
    assert loaded.n_samples == 200


def test_comparison_csv(tmp_path):
    rows = [{"barrier": 1.0, "probe": 0, "component": "u_x", "method": "sg", "mean": 0.1}]
    path = write_comparison_csv(str(tmp_path / "comparison.csv"), rows)
    assert open(path).read().splitlines() == ["barrier,probe,component,method,mean", "1,0,u_x,sg,0.10000000000000001"]


def test_gnuplot_scripts_point_at_their_tables(tmp_path):
    scripts = write_gnuplot_scripts(str(tmp_path), step_history=str(tmp_path / "step_history.csv"),
                                    mode_norms=str(tmp_path / "mode_norms.csv"), n_xi=10,
                                    pdfs=str(tmp_path / "pdfs.csv"), pdf_keys=[(1.0, 0, 0)])
    assert len(scripts) == 3
    assert "'step_history.csv'" in open(scripts[0]).read()
    assert "for [k=2:11]" in open(scripts[1]).read()
    assert scripts[2].endswith("plot_pdf_t1_p0_u_x.gp")


def test_summary_accepts_numpy_values(tmp_path):
    path = write_summary(str(tmp_path / "summary.json"), {"steps": np.int64(12), "norms": np.ones(2)})
    assert json.load(open(path)) == {"steps": 12, "norms": [1.0, 1.0]}


def test_ensemble_step_history_has_a_sample_column(tmp_path):
    first = [StepRecord(0, 0.0, 1e-9, True, 0.0), StepRecord(1, 1e-9, 1e-9, True, 2e-7, 0)]
    third = [StepRecord(0, 0.0, 1e-9, True, 0.0)]
    path = write_ensemble_step_history(str(tmp_path / "step_history.csv"), [first, [], third])
    assert open(path).readline().strip() == "sample,step,t,k,accepted,err_norm,gmres_iters,averaged"
    table = np.loadtxt(path, delimiter=",", skiprows=1)
    assert table[:, 0].tolist() == [0.0, 0.0, 2.0]
    assert read_step_history(path) == first + third


def test_sample_snapshots_cover_every_barrier(small_mesh, tmp_path):
    n_u, n_p = 2 * small_mesh.n_nodes, len(small_mesh.vertices)
    velocity = np.stack([np.stack([interpolate(small_mesh, lambda x, y: (q + t + 0 * x, y))
                                   for t in (1.0, 2.0)]) for q in range(2)])
    velocity[1] = np.nan
    ensemble = EnsembleResult(samples=draw_mc(2, 1, seed=0), barriers=[1.0, 2.0], velocity=velocity,
                              pressure=np.ones((2, 2, n_p)), errors=[None, "failed"])
    paths = export_sample_snapshots(ensemble, small_mesh, str(tmp_path), "mc")
    assert [p.rsplit("/", 1)[-1] for p in paths] == ["mc_samples_t1.csv", "mc_samples_t2.csv"]
    fields = read_fields_csv(paths[1])
    assert sorted(fields) == ["pressure_0", "pressure_1", "velocity_0", "velocity_1"]
    assert_allclose(fields["velocity_0"], velocity[0, 1], rtol=0)
    assert len(fields["velocity_0"]) == n_u
    assert np.all(np.isnan(fields["velocity_1"]))
    assert_allclose(fields["pressure_0"], 1.0, atol=1e-14)
