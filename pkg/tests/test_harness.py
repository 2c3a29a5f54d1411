import numpy as np
import pytest

from flowcell import harness, mfem, qoi
from flowcell import mesh as fmesh
from flowcell import randfield as rf

from test_mfem import _Q7_BARY, _Q7_W, constant_field, random_lognormal_field

EXP_SPEC = rf.CovarianceSpec(kind="exponential", sigma2=1.0, lam=1.0)
TINY_SPEC = rf.CovarianceSpec(kind="exponential", sigma2=1e-20, lam=1.0)


class TestNestedElementMap:
    @pytest.mark.parametrize("nf,nc", [(4, 2), (8, 2), (8, 4), (4, 4)])
    def test_fine_elements_inside_mapped_coarse_element(self, nf, nc):
        fine = fmesh.build_uniform_mesh(nf)
        coarse = fmesh.build_uniform_mesh(nc)
        emap = harness.nested_element_map(fine, coarse)
        for t in range(fine.num_elements):
            for v in fine.vertices[fine.elements[t]]:
                bary = fmesh.barycentric_coordinates(coarse, emap[t], v)
                assert bary.min() >= -1e-12

    def test_rejects_non_nested(self):
        with pytest.raises(ValueError):
            harness.nested_element_map(fmesh.build_uniform_mesh(4),
                                       fmesh.build_uniform_mesh(3))


def test_linear_coeffs_roundtrip():
    m = fmesh.build_uniform_mesh(3)
    rng = np.random.default_rng(0)
    c0 = rng.standard_normal(m.num_elements)
    c = rng.standard_normal((m.num_elements, 2))
    mids = m.edge_midpoints[m.element_edges]
    vals = c0[:, None] + (mids * c[:, None, :]).sum(axis=2)
    a, b = harness.linear_coeffs_from_midpoint_values(m, vals)
    assert np.allclose(a, c0, atol=1e-12)
    assert np.allclose(b, c, atol=1e-12)


def quad7_velocity_error(fine_mesh, fine_flux, coarse_mesh, coarse_flux):
    """Independent oracle: locate each quadrature point in the coarse mesh
    and integrate the squared velocity difference with a degree-5 rule."""
    af, bf = mfem.element_velocity_coeffs(fine_mesh, fine_flux)
    ac, bc = mfem.element_velocity_coeffs(coarse_mesh, coarse_flux)
    p = fine_mesh.vertices[fine_mesh.elements]
    total = 0.0
    for t in range(fine_mesh.num_elements):
        pts = _Q7_BARY @ p[t]
        for w, x in zip(_Q7_W, pts):
            tc = fmesh.locate_element(coarse_mesh, x)
            diff = (af[t] + bf[t] * x) - (ac[tc] + bc[tc] * x)
            total += fine_mesh.element_area * w * float(diff @ diff)
    return np.sqrt(total)


def quad7_cr_error(fine_mesh, fine_vals, coarse_mesh, coarse_vals):
    def eval_cr(mesh, vals, t, x):
        bary = fmesh.barycentric_coordinates(mesh, t, x)
        return float((1.0 - 2.0 * bary) @ vals[t])

    p = fine_mesh.vertices[fine_mesh.elements]
    total = 0.0
    for t in range(fine_mesh.num_elements):
        pts = _Q7_BARY @ p[t]
        for w, x in zip(_Q7_W, pts):
            tc = fmesh.locate_element(coarse_mesh, x)
            d = eval_cr(fine_mesh, fine_vals, t, x) - eval_cr(
                coarse_mesh, coarse_vals, tc, x)
            total += fine_mesh.element_area * w * d * d
    return np.sqrt(total)


class TestSolutionErrors:
    def test_self_comparison_is_zero(self):
        m = fmesh.build_uniform_mesh(4)
        sol = mfem.solve_hybridized(m, random_lognormal_field(m, seed=1))
        errs = harness.solution_errors(m, sol, m, sol)
        assert all(e < 1e-13 for e in errs)

    def test_exact_solution_on_all_levels(self):
        fine = fmesh.build_uniform_mesh(8)
        coarse = fmesh.build_uniform_mesh(4)
        sol_f = mfem.solve_hybridized(fine, constant_field(fine))
        sol_c = mfem.solve_hybridized(coarse, constant_field(coarse))
        errs = harness.solution_errors(fine, sol_f, coarse, sol_c)
        assert all(e < 1e-9 for e in errs)

    def test_velocity_and_cr_errors_vs_quadrature_oracle(self):
        fine = fmesh.build_uniform_mesh(4)
        coarse = fmesh.build_uniform_mesh(2)
        rng = np.random.default_rng(5)

        def fake_solution(mesh):
            return mfem.MixedSolution(
                edge_flux=rng.standard_normal(mesh.num_edges),
                pressure=rng.standard_normal(mesh.num_elements),
                multipliers=np.zeros(mesh.num_edges),
                recovered_pressure=rng.standard_normal((mesh.num_elements, 3)))

        sol_f, sol_c = fake_solution(fine), fake_solution(coarse)
        vel, p0, cr, _ = harness.solution_errors(fine, sol_f, coarse, sol_c)
        oracle_vel = quad7_velocity_error(fine, sol_f.edge_flux,
                                          coarse, sol_c.edge_flux)
        assert abs(vel - oracle_vel) < 1e-10
        oracle_cr = quad7_cr_error(fine, sol_f.recovered_pressure,
                                   coarse, sol_c.recovered_pressure)
        assert abs(cr - oracle_cr) < 1e-10
        # P0 oracle: coarse-element average of the fine values vs coarse.
        emap = harness.nested_element_map(fine, coarse)
        proj = np.zeros(coarse.num_elements)
        for tc in range(coarse.num_elements):
            proj[tc] = sol_f.pressure[emap == tc].mean()
        du = proj - sol_c.pressure
        assert abs(p0 - np.sqrt(coarse.element_area * (du**2).sum())) < 1e-12

    def test_coupled_realizations_share_vertex_values(self):
        fine = fmesh.build_uniform_mesh(8)
        coarse = fmesh.build_uniform_mesh(4)
        f = rf.sample_circulant(EXP_SPEC, fine, (3, 0, 0))
        c = rf.restrict_to_coarse(f, coarse)
        for i, v in enumerate(coarse.vertices):
            ix, iy = int(round(v[0] * 8)), int(round(v[1] * 8))
            assert c.vertex_log_values[i] == f.vertex_log_values[iy * 9 + ix]


class TestConfig:
    def test_rejects_non_nested_reference(self):
        with pytest.raises(ValueError):
            harness.ConvergenceConfig(spec=EXP_SPEC, n0=4, L=2, n_ref=24)
        with pytest.raises(ValueError):
            harness.ConvergenceConfig(spec=EXP_SPEC, n0=4, L=2, n_ref=16)

    def test_rejects_kle_without_modes(self):
        with pytest.raises(ValueError):
            harness.ConvergenceConfig(spec=EXP_SPEC, sampler="kle")

    def test_level_ns(self):
        cfg = harness.ConvergenceConfig(spec=EXP_SPEC, n0=2, L=2, n_ref=16)
        assert cfg.level_ns == [2, 4, 8]


class TestFeConvergence:
    def test_degenerate_field_zero_errors_undefined_slopes(self):
        cfg = harness.ConvergenceConfig(spec=TINY_SPEC, n0=2, L=1, n_ref=8,
                                        N=3, seed=0)
        report = harness.run_fe_convergence(cfg, bootstrap=10)
        for s in report.series:
            assert np.all(s.values < 1e-9)
            assert s.slope is None

    def test_small_run_errors_decrease(self):
        cfg = harness.ConvergenceConfig(spec=EXP_SPEC, n0=4, L=2, n_ref=32,
                                        N=20, seed=1)
        report = harness.run_fe_convergence(cfg, bootstrap=20)
        names = [s.name for s in report.series]
        assert names == list(harness.FE_ERROR_NAMES)
        for s in report.series:
            assert np.all(np.diff(s.values) < 0)     # finer level, less error
            assert s.slope is not None and s.slope > 0
            lo, hi = s.ci
            assert lo <= s.slope <= hi


class TestMomentDecay:
    def test_degenerate_field(self):
        cfg = harness.ConvergenceConfig(spec=TINY_SPEC, n0=2, L=2, n_ref=16,
                                        N=5, qois=(qoi.QoiKind(qoi.K_EFF),))
        report = harness.run_moment_decay(cfg, bootstrap=10)
        mean = next(s for s in report.series if s.name.startswith("mean_decay"))
        assert np.all(mean.values < 1e-9)
        assert mean.slope is None

    def test_small_run_positive_rates(self):
        cfg = harness.ConvergenceConfig(spec=EXP_SPEC, n0=4, L=2, n_ref=32,
                                        N=60, seed=3,
                                        qois=(qoi.QoiKind(qoi.K_EFF),))
        report = harness.run_moment_decay(cfg, bootstrap=20)
        by_name = {s.name: s for s in report.series}
        assert by_name["mean_decay:k_eff"].slope > 0
        assert by_name["var_decay:k_eff"].slope > 0
        assert len(by_name["var_decay:k_eff"].hs) == cfg.L


class TestCostComparison:
    def test_single_level_identity(self):
        rows = harness.run_cost_comparison(
            qoi.QoiKind(qoi.K_EFF), EXP_SPEC, eps=0.02, finest_ns=[4],
            n0=4, seed=0, pilot=20)
        assert rows[0]["levels"] == 1
        assert rows[0]["mc_cost_units"] == rows[0]["mlmc_cost_units"]

    def test_rejects_bad_grid(self):
        with pytest.raises(ValueError):
            harness.run_cost_comparison(qoi.QoiKind(qoi.K_EFF), EXP_SPEC,
                                        eps=0.1, finest_ns=[12], n0=4)
        with pytest.raises(ValueError):
            harness.run_cost_comparison(qoi.QoiKind(qoi.K_EFF), EXP_SPEC,
                                        eps=-1.0, finest_ns=[4], n0=4)


class TestReportCsv:
    def test_format_and_reproducibility(self, tmp_path):
        cfg = harness.ConvergenceConfig(spec=EXP_SPEC, n0=2, L=1, n_ref=8,
                                        N=5, seed=7)
        report1 = harness.run_fe_convergence(cfg, bootstrap=10)
        path1 = harness.write_report_csv(report1, tmp_path)
        assert path1.endswith("experiment_fe_convergence_7.csv")
        text = open(path1).read()
        assert text.startswith("# experiment=fe_convergence\n")
        assert "series,h,value\n" in text
        assert "[slopes]\n" in text

        # Same config run with a worker pool produces identical bytes.
        cfg2 = harness.ConvergenceConfig(spec=EXP_SPEC, n0=2, L=1, n_ref=8,
                                         N=5, seed=7, workers=2)
        report2 = harness.run_fe_convergence(cfg2, bootstrap=10)
        out2 = tmp_path / "second"
        out2.mkdir()
        path2 = harness.write_report_csv(report2, out2)
        assert open(path1, "rb").read() == open(path2, "rb").read()

    def test_cost_csv(self, tmp_path):
        rows = harness.run_cost_comparison(
            qoi.QoiKind(qoi.K_EFF), EXP_SPEC, eps=0.05, finest_ns=[4, 8],
            n0=4, seed=0, pilot=15)
        path = harness.write_cost_csv(rows, tmp_path, seed=0)
        lines = open(path).read().splitlines()
        assert lines[0] == "# experiment=cost_comparison"
        assert lines[2] == "finest_n,h,levels,mc_N,mc_cost_units,mlmc_cost_units"
        assert len(lines) == 5
