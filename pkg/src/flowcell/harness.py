"""Scripted convergence and cost experiments with rate fitting.

Reference-versus-coarse errors are integrated exactly: on nested uniform
meshes with aligned diagonals every fine triangle lies inside exactly one
coarse triangle, so coarse velocity (affine), piecewise-constant pressure
and recovered linear pressure restrict to polynomials on each fine element
and the edge-midpoint rule integrates the squared differences exactly.

Experiment reports serialize to CSV with a '# key=value' header block and
are byte-reproducible for a fixed config and seed.
"""

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from flowcell import mesh as fmesh
from flowcell import qoi as fqoi
from flowcell import randfield as rf
from flowcell.mfem import solve_hybridized
from flowcell.mlmc import Estimator, optimal_allocation, run_samples

BOOTSTRAP_DEFAULT = 200

FE_ERROR_NAMES = ("velocity", "pressure", "recovered_pressure", "k_eff")


@dataclass(frozen=True)
class ConvergenceConfig:
    """Shared settings for the convergence and moment-decay experiments."""

    spec: rf.CovarianceSpec
    n0: int = 4
    L: int = 3
    n_ref: int = 64
    N: int = 200
    seed: int = 0
    sampler: str = "circulant"
    kle_modes: int | None = None
    qois: tuple = (fqoi.QoiKind(fqoi.K_EFF),)
    workers: int = 1

    def __post_init__(self):
        if self.n0 < 1 or self.L < 0 or self.N < 2:
            raise ValueError("need n0 >= 1, L >= 0 and N >= 2")
        finest = self.n0 * 2**self.L
        if self.n_ref <= finest or self.n_ref % finest != 0:
            raise ValueError(
                f"reference n={self.n_ref} must be strictly finer than and "
                f"nested with the finest test level n={finest}")
        if self.sampler not in ("circulant", "kle"):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if self.sampler == "kle" and not self.kle_modes:
            raise ValueError("kle sampler requires kle_modes")

    @property
    def level_ns(self):
        return [self.n0 * 2**level for level in range(self.L + 1)]


@dataclass
class RateSeries:
    name: str
    hs: np.ndarray
    values: np.ndarray
    slope: float | None
    ci: tuple | None


@dataclass
class RateReport:
    name: str
    config: dict
    series: list = field(default_factory=list)
    seconds: float = 0.0


# ---------------------------------------------------------------------------
# Exact embedding of coarse discrete fields on a nested fine mesh.

_element_maps = {}


def nested_element_map(fine_mesh, coarse_mesh):
    """For each fine element, the coarse element that contains it."""
    key = (fine_mesh.n, coarse_mesh.n)
    if key in _element_maps:
        return _element_maps[key]
    if fine_mesh.n % coarse_mesh.n != 0:
        raise ValueError("meshes are not nested")
    nc = coarse_mesh.n
    cent = fine_mesh.element_centroids()
    cx = np.floor(cent[:, 0] * nc).astype(int).clip(0, nc - 1)
    cy = np.floor(cent[:, 1] * nc).astype(int).clip(0, nc - 1)
    u = cent[:, 0] * nc - cx
    v = cent[:, 1] * nc - cy
    # Diagonals align, so no fine centroid sits on a coarse diagonal.
    emap = 2 * (cy * nc + cx) + (v > u)
    _element_maps[key] = emap
    return emap


def linear_coeffs_from_midpoint_values(mesh, values):
    """(a, b) with p(x) = a + b.x linear per element matching the three
    edge-midpoint values (the recovered-pressure representation)."""
    p = mesh.vertices[mesh.elements]
    mid = np.empty_like(p)
    mid[:, 0] = 0.5 * (p[:, 1] + p[:, 2])
    mid[:, 1] = 0.5 * (p[:, 0] + p[:, 2])
    mid[:, 2] = 0.5 * (p[:, 0] + p[:, 1])
    A = np.concatenate([np.ones_like(mid[..., :1]), mid], axis=2)
    coeffs = np.linalg.solve(A, values[..., None])[..., 0]
    return coeffs[:, 0], coeffs[:, 1:]


def solution_errors(fine_mesh, fine_sol, coarse_mesh, coarse_sol):
    """Exact L2 errors of the coarse solution against the fine one.

    Returns (velocity, p0 pressure, recovered pressure, |k_eff difference|).
    """
    from flowcell.mfem import element_velocity_coeffs

    emap = nested_element_map(fine_mesh, coarse_mesh)
    area = fine_mesh.element_area
    p = fine_mesh.vertices[fine_mesh.elements]
    mid = np.empty_like(p)
    mid[:, 0] = 0.5 * (p[:, 1] + p[:, 2])
    mid[:, 1] = 0.5 * (p[:, 0] + p[:, 2])
    mid[:, 2] = 0.5 * (p[:, 0] + p[:, 1])

    af, bf = element_velocity_coeffs(fine_mesh, fine_sol.edge_flux)
    ac, bc = element_velocity_coeffs(coarse_mesh, coarse_sol.edge_flux)
    da = af - ac[emap]
    db = bf - bc[emap]
    dq = da[:, None, :] + db[:, None, None] * mid
    vel_err = np.sqrt((area / 3.0) * (dq**2).sum())

    # P0 pressure: compare against the coarse-mesh L2 projection of the
    # reference pressure (elementwise average over the nested children),
    # so exact discrete solutions agree exactly across levels and the
    # piecewise-constant projection error does not mask the solver error.
    counts = np.bincount(emap, minlength=coarse_mesh.num_elements)
    proj = (np.bincount(emap, weights=fine_sol.pressure,
                        minlength=coarse_mesh.num_elements) / counts)
    du = proj - coarse_sol.pressure
    p0_err = np.sqrt(coarse_mesh.element_area * (du**2).sum())

    a_f, b_f = linear_coeffs_from_midpoint_values(
        fine_mesh, fine_sol.recovered_pressure)
    a_c, b_c = linear_coeffs_from_midpoint_values(
        coarse_mesh, coarse_sol.recovered_pressure)
    d0 = a_f - a_c[emap]
    d1 = b_f - b_c[emap]
    dvals = d0[:, None] + (mid * d1[:, None, :]).sum(axis=2)
    cr_err = np.sqrt((area / 3.0) * (dvals**2).sum())

    k_f = fqoi.effective_permeability(fine_mesh, fine_sol)
    k_c = fqoi.effective_permeability(coarse_mesh, coarse_sol)
    return vel_err, p0_err, cr_err, abs(k_f - k_c)


# ---------------------------------------------------------------------------
# Per-sample runners (pickleable for the process pool).

@dataclass
class _FeSampleRunner:
    config: ConvergenceConfig
    kle_basis: object = None

    def sample(self, i):
        cfg = self.config
        ref_mesh = fmesh.build_uniform_mesh(cfg.n_ref)
        seed_id = (cfg.seed, 0, i)
        if cfg.sampler == "circulant":
            field_ref = rf.sample_circulant(cfg.spec, ref_mesh, seed_id)
        else:
            field_ref = rf.sample_kle(self.kle_basis, ref_mesh, seed_id)
        ref_sol = solve_hybridized(ref_mesh, field_ref)
        errors = np.empty((cfg.L + 1, len(FE_ERROR_NAMES)))
        for level, n in enumerate(cfg.level_ns):
            m = fmesh.build_uniform_mesh(n)
            coarse = rf.restrict_to_coarse(field_ref, m)
            sol = solve_hybridized(m, coarse)
            errors[level] = solution_errors(ref_mesh, ref_sol, m, sol)
        return errors


@dataclass
class _MomentSampleRunner:
    config: ConvergenceConfig
    kle_basis: object = None

    def sample(self, i):
        cfg = self.config
        ref_mesh = fmesh.build_uniform_mesh(cfg.n_ref)
        seed_id = (cfg.seed, 0, i)
        if cfg.sampler == "circulant":
            field_ref = rf.sample_circulant(cfg.spec, ref_mesh, seed_id)
        else:
            field_ref = rf.sample_kle(self.kle_basis, ref_mesh, seed_id)
        ref_sol = solve_hybridized(ref_mesh, field_ref)
        nq = len(cfg.qois)
        values = np.empty((cfg.L + 2, nq))   # levels 0..L plus reference
        for level, n in enumerate(cfg.level_ns):
            m = fmesh.build_uniform_mesh(n)
            coarse = rf.restrict_to_coarse(field_ref, m)
            sol = solve_hybridized(m, coarse)
            for j, kind in enumerate(cfg.qois):
                values[level, j] = fqoi.evaluate_qoi(kind, m, sol)
        for j, kind in enumerate(cfg.qois):
            values[-1, j] = fqoi.evaluate_qoi(kind, ref_mesh, ref_sol)
        return values


def _chunk_run(args):
    runner, idxs = args
    return [runner.sample(i) for i in idxs]


def _map_samples(runner, N, workers):
    idxs = list(range(N))
    if workers <= 1:
        return _chunk_run((runner, idxs))
    chunks = [idxs[i::workers] for i in range(workers)]
    chunks = [c for c in chunks if c]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_chunk_run, [(runner, c) for c in chunks]))
    out = [None] * N
    for i, chunk in enumerate(chunks):
        for j, idx in enumerate(chunk):
            out[idx] = parts[i][j]
    return out


def _build_kle(cfg):
    if cfg.sampler == "kle":
        return rf.kle_build(cfg.spec, K=cfg.kle_modes)
    return None


# ---------------------------------------------------------------------------
# Slope fitting.

def _fit_slope(hs, values, skip_coarsest):
    """Least-squares slope of log2(value) against log2(h); None when the
    data is at round-off level (degenerate problems have no rate)."""
    hs = np.asarray(hs, dtype=float)
    values = np.asarray(values, dtype=float)
    if skip_coarsest and len(hs) >= 3:
        hs, values = hs[1:], values[1:]
    if np.any(values < 1e-9) or len(hs) < 2:
        return None
    return float(np.polyfit(np.log2(hs), np.log2(values), 1)[0])


def _bootstrap_ci(per_sample, reduce_fn, hs, skip_coarsest, seed, B):
    """Percentile CI of the fitted slope under sample resampling."""
    if B <= 0:
        return None
    rng = np.random.default_rng(seed)
    N = per_sample.shape[0]
    slopes = []
    for _ in range(B):
        pick = rng.integers(0, N, size=N)
        vals = reduce_fn(per_sample[pick])
        s = _fit_slope(hs, vals, skip_coarsest)
        if s is not None:
            slopes.append(s)
    if len(slopes) < B // 2:
        return None
    lo, hi = np.percentile(slopes, [2.5, 97.5])
    return (float(lo), float(hi))


def _config_echo(name, cfg, extra=None):
    echo = {
        "experiment": name,
        "kind": cfg.spec.kind,
        "sigma2": repr(cfg.spec.sigma2),
        "lam": repr(cfg.spec.lam),
        "nu": repr(cfg.spec.nu),
        "sampler": cfg.sampler,
        "kle_modes": repr(cfg.kle_modes),
        "n0": cfg.n0,
        "L": cfg.L,
        "n_ref": cfg.n_ref,
        "N": cfg.N,
        "seed": cfg.seed,
    }
    if extra:
        echo.update(extra)
    return echo


# ---------------------------------------------------------------------------
# Experiments.

def run_fe_convergence(config, bootstrap=BOOTSTRAP_DEFAULT):
    """RMS discretization errors against a fine reference, with slopes.

    Per sample, the reference realization is restricted to every test
    level and the errors ||q*-q_h||, ||u*-u_h||, ||u~*-u~_h|| and
    |k*-k_h| are integrated exactly on the reference mesh.
    """
    t0 = time.perf_counter()
    runner = _FeSampleRunner(config, _build_kle(config))
    samples = np.array(_map_samples(runner, config.N, config.workers))
    hs = np.array([1.0 / n for n in config.level_ns])
    skip = config.L >= 3
    report = RateReport(name="fe_convergence",
                        config=_config_echo("fe_convergence", config))
    for j, name in enumerate(FE_ERROR_NAMES):
        per = samples[:, :, j]                       # (N, levels)

        def rms(block):
            return np.sqrt((block**2).mean(axis=0))

        values = rms(per)
        slope = _fit_slope(hs, values, skip)
        ci = None
        if slope is not None:
            ci = _bootstrap_ci(per, rms, hs, skip, config.seed, bootstrap)
        report.series.append(RateSeries(name=name, hs=hs, values=values,
                                        slope=slope, ci=ci))
    report.seconds = time.perf_counter() - t0
    return report


def run_moment_decay(config, bootstrap=BOOTSTRAP_DEFAULT):
    """|E[Q_h - Q*]| vs h and V[Q_h - Q_{2h}] vs h for the configured QoIs."""
    t0 = time.perf_counter()
    runner = _MomentSampleRunner(config, _build_kle(config))
    samples = np.array(_map_samples(runner, config.N, config.workers))
    hs = np.array([1.0 / n for n in config.level_ns])
    skip = config.L >= 3
    report = RateReport(name="moment_decay",
                        config=_config_echo("moment_decay", config))
    for j, kind in enumerate(config.qois):
        label = kind.kind
        qvals = samples[:, :, j]                 # (N, levels+1), last = ref
        diffs = qvals[:, :-1] - qvals[:, -1:]    # Q_h - Q_ref

        def mean_abs(block):
            return np.abs(block.mean(axis=0))

        mean_vals = mean_abs(diffs)
        slope = _fit_slope(hs, mean_vals, skip)
        ci = (None if slope is None else
              _bootstrap_ci(diffs, mean_abs, hs, skip, config.seed, bootstrap))
        report.series.append(RateSeries(
            name=f"mean_decay:{label}", hs=hs, values=mean_vals,
            slope=slope, ci=ci))

        pair = qvals[:, 1:config.L + 1] - qvals[:, 0:config.L]

        def variance(block):
            return block.var(axis=0, ddof=1)

        var_vals = variance(pair)
        var_hs = hs[1:]
        vslope = _fit_slope(var_hs, var_vals, skip)
        vci = (None if vslope is None else
               _bootstrap_ci(pair, variance, var_hs, skip,
                             config.seed + 1, bootstrap))
        report.series.append(RateSeries(
            name=f"var_decay:{label}", hs=var_hs, values=var_vals,
            slope=vslope, ci=vci))
    report.seconds = time.perf_counter() - t0
    return report


def run_cost_comparison(qoi_kind, spec, eps, finest_ns, n0=4, seed=0,
                        pilot=50, workers=1, sampler="circulant",
                        kle_basis=None):
    """Modeled cost (machine-independent units) of MC vs MLMC per finest mesh.

    Pilot samples estimate the level variances; sample counts then follow
    the standard allocations for a sampling-error target of eps/sqrt(2)
    for both estimators.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    rows = []
    for n_fin in finest_ns:
        ratio = n_fin // n0
        if n_fin % n0 != 0 or ratio < 1 or ratio & (ratio - 1):
            raise ValueError(f"finest n={n_fin} is not n0*2^L with n0={n0}")
        L = int(round(np.log2(ratio)))
        est = Estimator(qoi_kind, spec, n0=n0, master_seed=seed,
                        sampler=sampler, kle_basis=kle_basis)
        level_var = []
        level_cost = []
        fine_var = fine_cost = None
        for level in range(L + 1):
            res = run_samples(est, [(level, i) for i in range(pilot)], workers)
            ys = np.array([r[0] for r in res])
            qs = np.array([r[1] for r in res])
            cost = np.mean([r[2] for r in res])
            level_var.append(ys.var(ddof=1))
            level_cost.append(cost)
            if level == L:
                fine_var = qs.var(ddof=1)
                n = n0 * 2**level
                fine_cost = 2.0 * n**2 + (n + 1) ** 2   # uncoupled solve
        hs = [1.0 / (n0 * 2**level) for level in range(L + 1)]
        counts = optimal_allocation(level_var, hs, eps)
        mlmc_cost = float(np.dot(counts, level_cost))
        n_mc = max(int(np.ceil(2.0 * fine_var / eps**2)), 1)
        mc_cost = n_mc * fine_cost
        rows.append({"finest_n": n_fin, "h": 1.0 / n_fin, "levels": L + 1,
                     "mc_N": n_mc, "mc_cost_units": mc_cost,
                     "mlmc_cost_units": mlmc_cost})
    return rows


# ---------------------------------------------------------------------------
# CSV output.

def report_csv_path(out_dir, report):
    return os.path.join(
        out_dir, f"experiment_{report.name}_{report.config['seed']}.csv")


def write_report_csv(report, out_dir):
    """Config echo as '# key=value' lines, data table, slope table."""
    path = report_csv_path(out_dir, report)
    with open(path, "w") as f:
        for key, val in report.config.items():
            f.write(f"# {key}={val}\n")
        f.write("series,h,value\n")
        for s in report.series:
            for h, v in zip(s.hs, s.values):
                f.write(f"{s.name},{h!r},{v!r}\n")
        f.write("[slopes]\n")
        f.write("series,slope,ci_lo,ci_hi\n")
        for s in report.series:
            if s.slope is None:
                f.write(f"{s.name},undefined,,\n")
            else:
                lo, hi = s.ci if s.ci else (float("nan"), float("nan"))
                f.write(f"{s.name},{s.slope!r},{lo!r},{hi!r}\n")
    return path


def write_cost_csv(rows, out_dir, seed):
    path = os.path.join(out_dir, f"experiment_cost_comparison_{seed}.csv")
    with open(path, "w") as f:
        f.write("# experiment=cost_comparison\n")
        f.write(f"# seed={seed}\n")
        f.write("finest_n,h,levels,mc_N,mc_cost_units,mlmc_cost_units\n")
        for r in rows:
            f.write(f"{r['finest_n']},{r['h']!r},{r['levels']},{r['mc_N']},"
                    f"{r['mc_cost_units']!r},{r['mlmc_cost_units']!r}\n")
    return path
