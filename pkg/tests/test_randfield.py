import numpy as np
import pytest

from flowcell import mesh as fmesh
from flowcell import randfield as rf


EXP_SPEC = rf.CovarianceSpec(kind="exponential", sigma2=1.0, lam=1.0)


class TestCovariance:
    def test_exponential_at_zero(self):
        assert rf.covariance(EXP_SPEC, 0.0) == 1.0

    def test_exponential_at_one(self):
        assert np.isclose(rf.covariance(EXP_SPEC, 1.0), np.exp(-1.0), atol=1e-12)

    def test_matern_half_equals_exponential_with_scaled_length(self):
        spec = rf.CovarianceSpec(kind="matern", sigma2=1.0, lam=1.0, nu=0.5)
        lt = spec.scaled_length
        r = np.linspace(0.0, 2.0, 50)
        expected = np.exp(-r / lt)
        assert np.allclose(rf.covariance(spec, r), expected, atol=1e-12)

    def test_matern_at_zero_is_sigma2(self):
        spec = rf.CovarianceSpec(kind="matern", sigma2=2.5, lam=0.5, nu=2.0)
        assert rf.covariance(spec, 0.0) == 2.5

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            rf.CovarianceSpec(kind="gaussian")
        with pytest.raises(ValueError):
            rf.CovarianceSpec(kind="exponential", sigma2=-1.0)
        with pytest.raises(ValueError):
            rf.CovarianceSpec(kind="exponential", lam=0.0)
        with pytest.raises(ValueError):
            rf.CovarianceSpec(kind="matern", nu=None)
        with pytest.raises(ValueError):
            rf.CovarianceSpec(kind="exponential", nu=1.0)


class TestCirculant:
    def test_degenerate_variance(self):
        spec = rf.CovarianceSpec(kind="exponential", sigma2=1e-20, lam=1.0)
        m = fmesh.build_uniform_mesh(4)
        real = rf.sample_circulant(spec, m, (1, 0, 0))
        assert np.all(np.abs(real.vertex_log_values) < 1e-8)
        assert np.allclose(real.element_values, 1.0, atol=1e-8)

    def test_determinism(self):
        m = fmesh.build_uniform_mesh(4)
        a = rf.sample_circulant(EXP_SPEC, m, (7, 2, 11))
        b = rf.sample_circulant(EXP_SPEC, m, (7, 2, 11))
        assert np.array_equal(a.vertex_log_values, b.vertex_log_values)
        c = rf.sample_circulant(EXP_SPEC, m, (7, 2, 12))
        assert not np.array_equal(a.vertex_log_values, c.vertex_log_values)

    def test_covariance_statistics_n2(self):
        # Sample covariance at the 9 vertices of the n=2 mesh vs rho(|x-y|),
        # entrywise within 5 standard errors.
        m = fmesh.build_uniform_mesh(2)
        N = 20000
        samples = np.empty((N, m.num_vertices))
        for i in range(N):
            samples[i] = rf.sample_circulant(EXP_SPEC, m, (3, 0, i)).vertex_log_values
        emp = samples.T @ samples / N
        d = np.linalg.norm(m.vertices[:, None] - m.vertices[None, :], axis=2)
        target = rf.covariance(EXP_SPEC, d)
        # var of the sample covariance of a bivariate normal.
        se = np.sqrt((target**2 + np.outer(np.diag(target), np.diag(target))) / N)
        assert np.all(np.abs(emp - target) <= 5 * se)

    def test_stationarity_pooled_lags(self):
        # Empirical covariance pooled over translations depends only on lag.
        m = fmesh.build_uniform_mesh(4)
        N = 4000
        grids = np.empty((N, 5, 5))
        for i in range(N):
            grids[i] = rf.sample_circulant(
                EXP_SPEC, m, (5, 0, i)).vertex_log_values.reshape(5, 5)
        # lag (1, 0): pool over all horizontally adjacent vertex pairs.
        prods = grids[:, :, :-1] * grids[:, :, 1:]
        pooled = prods.mean()
        target = rf.covariance(EXP_SPEC, 0.25)
        se = prods.reshape(N, -1).mean(axis=1).std(ddof=1) / np.sqrt(N)
        assert abs(pooled - target) <= 5 * se

    def test_element_values_positive_lognormal(self):
        m = fmesh.build_uniform_mesh(8)
        spec = rf.CovarianceSpec(kind="exponential", sigma2=4.0, lam=0.2)
        real = rf.sample_circulant(spec, m, (9, 0, 0))
        assert np.all(real.element_values > 0)
        assert np.all(np.isfinite(real.element_values))
        expected = np.exp(real.vertex_log_values[m.elements].mean(axis=1))
        assert np.allclose(real.element_values, expected)


class TestKle:
    def test_eigenvalues_decreasing_positive(self):
        basis = rf.kle_build(EXP_SPEC, K=20, m=16)
        assert np.all(basis.eigenvalues > 0)
        assert np.all(np.diff(basis.eigenvalues) <= 1e-14)

    def test_trace_identity(self):
        # Sum over all m^2 discrete modes approximates sigma2 * |D| = 1.
        spec = rf.CovarianceSpec(kind="matern", sigma2=1.0, lam=0.5, nu=2.0)
        m = 30
        basis = rf.kle_build(spec, K=m * m, m=m)
        assert abs(basis.eigenvalues.sum() - 1.0) < 0.02

    def test_matern_nu2_captures_95_percent_with_13_modes(self):
        spec = rf.CovarianceSpec(kind="matern", sigma2=1.0, lam=0.5, nu=2.0)
        basis = rf.kle_build(spec, K=13)
        assert basis.captured_variance_ratio > 0.95

    def test_rejects_too_many_modes(self):
        with pytest.raises(ValueError):
            rf.kle_build(EXP_SPEC, K=26, m=5)
        with pytest.raises(ValueError):
            rf.kle_build(EXP_SPEC, K=0)

    def test_sample_determinism_and_zero_modes(self):
        basis = rf.kle_build(EXP_SPEC, K=10, m=16)
        m = fmesh.build_uniform_mesh(4)
        a = rf.sample_kle(basis, m, (1, 0, 5))
        b = rf.sample_kle(basis, m, (1, 0, 5))
        assert np.array_equal(a.vertex_log_values, b.vertex_log_values)
        # All coefficients zero -> g == 0, a == 1.
        g = basis.mode_matrix(m) @ np.zeros(10)
        assert np.all(g == 0.0)

    def test_pointwise_variance_statistics(self):
        # Var g(x) over samples ~ sum_k lambda_k phi_k(x)^2 at a vertex.
        spec = rf.CovarianceSpec(kind="matern", sigma2=1.0, lam=0.5, nu=2.0)
        basis = rf.kle_build(spec, K=13)
        m = fmesh.build_uniform_mesh(2)
        v = 4  # center vertex
        N = 20000
        vals = np.empty(N)
        for i in range(N):
            vals[i] = rf.sample_kle(basis, m, (2, 0, i)).vertex_log_values[v]
        target = float((basis.mode_matrix(m)[v] ** 2).sum())
        est = vals.var(ddof=1)
        se = target * np.sqrt(2.0 / N)
        assert abs(est - target) <= 5 * se

    def test_kle_vs_circulant_marginal_variance(self):
        # matern nu=0.5 == exponential with scaled length; compare single-point
        # marginal variance between samplers within 5 standard errors.
        mat = rf.CovarianceSpec(kind="matern", sigma2=1.0, lam=1.0, nu=0.5)
        exp_eq = rf.CovarianceSpec(kind="exponential", sigma2=1.0,
                                   lam=mat.scaled_length)
        basis = rf.kle_build(mat, K=200, m=24)
        m = fmesh.build_uniform_mesh(2)
        N = 8000
        kv_ = np.empty(N)
        cv = np.empty(N)
        for i in range(N):
            kv_[i] = rf.sample_kle(basis, m, (4, 0, i)).vertex_log_values[4]
            cv[i] = rf.sample_circulant(exp_eq, m, (6, 0, i)).vertex_log_values[4]
        se = np.sqrt(2.0 / N) * 1.0
        assert abs(kv_.var(ddof=1) - cv.var(ddof=1)) <= 5 * np.sqrt(2) * se


class TestRestriction:
    def test_identity_restriction(self):
        m = fmesh.build_uniform_mesh(4)
        fine = rf.sample_circulant(EXP_SPEC, m, (1, 1, 0), level=1)
        same = rf.restrict_to_coarse(fine, m)
        assert np.array_equal(same.vertex_log_values, fine.vertex_log_values)
        assert same.seed_id == fine.seed_id

    def test_constant_field(self):
        fine_mesh = fmesh.build_uniform_mesh(8)
        coarse_mesh = fmesh.build_uniform_mesh(4)
        fine = rf.FieldRealization(
            level=1, n=8,
            vertex_log_values=np.full(fine_mesh.num_vertices, 0.7),
            element_values=np.full(fine_mesh.num_elements, np.exp(0.7)),
            seed_id=(0, 1, 0))
        coarse = rf.restrict_to_coarse(fine, coarse_mesh)
        assert np.allclose(coarse.element_values, np.exp(0.7))

    def test_shared_vertices_bitwise(self):
        fine_mesh = fmesh.build_uniform_mesh(8)
        coarse_mesh = fmesh.build_uniform_mesh(4)
        fine = rf.sample_circulant(EXP_SPEC, fine_mesh, (1, 1, 3), level=1)
        coarse = rf.restrict_to_coarse(fine, coarse_mesh)
        for i, v in enumerate(coarse_mesh.vertices):
            ix, iy = int(round(v[0] * 8)), int(round(v[1] * 8))
            assert coarse.vertex_log_values[i] == fine.vertex_log_values[iy * 9 + ix]

    def test_rejects_non_nested(self):
        fine_mesh = fmesh.build_uniform_mesh(8)
        coarse_mesh = fmesh.build_uniform_mesh(3)
        fine = rf.sample_circulant(EXP_SPEC, fine_mesh, (1, 1, 0))
        with pytest.raises(ValueError):
            rf.restrict_to_coarse(fine, coarse_mesh)


def test_field_dump_csv(tmp_path):
    m = fmesh.build_uniform_mesh(2)
    real = rf.sample_circulant(EXP_SPEC, m, (1, 0, 0))
    path = tmp_path / "field.csv"
    rf.dump_field_csv(real, m, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "vertex_id,x,y,log_a"
    assert len(lines) == 1 + m.num_vertices
