"""Standard and multilevel Monte Carlo estimation of E[Q].

The multilevel estimator telescopes E[Q_L] = sum_l E[Y_l] with Y_0 = Q_{h_0}
and Y_l = Q_{h_l} - Q_{h_{l-1}}, where both terms of a correction share the
same field realization (sampled on the fine level and restricted to the
coarse one).  Sample counts follow the variance-optimal allocation with the
error budget split evenly between sampling variance and bias.

Costs are tracked in machine-independent units (elements solved plus field
points sampled) and, optionally, wall-clock seconds.  Seconds are off by
default so that output files are bit-reproducible across machines and
worker counts.
"""

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from flowcell import mesh as fmesh
from flowcell import qoi as fqoi
from flowcell import randfield as rf
from flowcell.mfem import ProblemData, SolverError, solve_hybridized

PILOT_DEFAULT = 50
ALPHA_FLOOR = 0.5
LEVEL_CAP_DEFAULT = 10


@dataclass
class LevelStats:
    """Mergeable running sums for one level's correction samples."""

    level: int
    h: float
    n_samples: int = 0
    sum_y: float = 0.0
    sum_y2: float = 0.0
    sum_q: float = 0.0
    sum_q2: float = 0.0
    cost_units: float = 0.0
    cost_seconds: float = 0.0

    def add(self, y, q, cost_units, cost_seconds=0.0):
        self.n_samples += 1
        self.sum_y += y
        self.sum_y2 += y * y
        self.sum_q += q
        self.sum_q2 += q * q
        self.cost_units += cost_units
        self.cost_seconds += cost_seconds

    def merge(self, other):
        if (other.level, other.h) != (self.level, self.h):
            raise ValueError("cannot merge stats from different levels")
        return LevelStats(
            level=self.level, h=self.h,
            n_samples=self.n_samples + other.n_samples,
            sum_y=self.sum_y + other.sum_y,
            sum_y2=self.sum_y2 + other.sum_y2,
            sum_q=self.sum_q + other.sum_q,
            sum_q2=self.sum_q2 + other.sum_q2,
            cost_units=self.cost_units + other.cost_units,
            cost_seconds=self.cost_seconds + other.cost_seconds)

    @property
    def mean_y(self):
        return self.sum_y / self.n_samples

    @property
    def var_y(self):
        if self.n_samples < 2:
            return 0.0
        v = (self.sum_y2 - self.sum_y**2 / self.n_samples) / (self.n_samples - 1)
        return max(v, 0.0)

    @property
    def mean_q(self):
        return self.sum_q / self.n_samples

    @property
    def var_q(self):
        if self.n_samples < 2:
            return 0.0
        v = (self.sum_q2 - self.sum_q**2 / self.n_samples) / (self.n_samples - 1)
        return max(v, 0.0)


@dataclass
class MlmcResult:
    estimate: float
    sampling_error: float
    eps: float
    final_level: int
    alpha_hat: float
    beta_hat: float
    gamma_hat: float
    converged: bool
    qoi_kind: str
    levels: list = field(default_factory=list)   # LevelStats per level


class Estimator:
    """Per-sample evaluator of Q and level corrections for one problem.

    Immutable configuration; safe to ship to worker processes.  Meshes and
    sampler caches are rebuilt lazily in each process.
    """

    def __init__(self, qoi_kind, spec, n0, master_seed, sampler="circulant",
                 kle_basis=None, data=None, method="direct"):
        if sampler not in ("circulant", "kle"):
            raise ValueError(f"unknown sampler {sampler!r}")
        if sampler == "kle" and kle_basis is None:
            raise ValueError("kle sampler requires a prebuilt KleBasis")
        self.qoi_kind = qoi_kind
        self.spec = spec
        self.n0 = int(n0)
        self.master_seed = int(master_seed)
        self.sampler = sampler
        self.kle_basis = kle_basis
        self.data = data if data is not None else ProblemData()
        self.method = method
        self._meshes = {}

    def mesh(self, level):
        if level not in self._meshes:
            self._meshes[level] = fmesh.build_uniform_mesh(self.n0 * 2**level)
        return self._meshes[level]

    def sample_field(self, level, sample_index, purpose=0):
        seed_id = (self.master_seed, level, sample_index)
        m = self.mesh(level)
        if self.sampler == "circulant":
            return rf.sample_circulant(self.spec, m, seed_id, level=level,
                                       purpose=purpose)
        return rf.sample_kle(self.kle_basis, m, seed_id, level=level,
                             purpose=purpose)

    def _evaluate(self, mesh, field_real):
        sol = solve_hybridized(mesh, field_real, self.data, method=self.method)
        return fqoi.evaluate_qoi(self.qoi_kind, mesh, sol)

    def _coupled_once(self, level, sample_index, purpose):
        fine_mesh = self.mesh(level)
        field_real = self.sample_field(level, sample_index, purpose)
        cost = 2.0 * fine_mesh.n**2 + (fine_mesh.n + 1) ** 2
        q_fine = self._evaluate(fine_mesh, field_real)
        if level == 0:
            return q_fine, q_fine, cost
        coarse_mesh = self.mesh(level - 1)
        coarse = rf.restrict_to_coarse(field_real, coarse_mesh)
        cost += 2.0 * coarse_mesh.n**2
        q_coarse = self._evaluate(coarse_mesh, coarse)
        return q_fine - q_coarse, q_fine, cost

    def coupled_sample(self, level, sample_index):
        """(Y_l, Q_fine, cost units); failed samples are retried once with
        an independent sub-seed, then abort with the offending seed id."""
        try:
            return self._coupled_once(level, sample_index, purpose=0)
        except (fqoi.TrackingError, SolverError):
            pass
        try:
            return self._coupled_once(level, sample_index, purpose=1)
        except (fqoi.TrackingError, SolverError) as exc:
            seed_id = (self.master_seed, level, sample_index)
            raise SolverError(
                f"sample failed twice (seed_id {seed_id}): {exc}") from exc


def _run_chunk(args):
    est, tasks = args
    return [est.coupled_sample(level, idx) for level, idx in tasks]


def run_samples(est, tasks, workers=1):
    """Evaluate (level, sample index) tasks; results in task order.

    The outcome is independent of the worker count because every sample
    draws from its own seed stream.
    """
    tasks = list(tasks)
    if workers <= 1 or len(tasks) <= 1:
        return _run_chunk((est, tasks))
    chunks = [tasks[i::workers] for i in range(workers)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_run_chunk, [(est, c) for c in chunks if c]))
    out = [None] * len(tasks)
    for i, chunk in enumerate([c for c in chunks if c]):
        for j, _ in enumerate(chunk):
            out[i + j * workers] = parts[i][j]
    return out


def mc_estimate(evaluate, N, seed):
    """Plain Monte Carlo: mean, unbiased variance, total cost.

    evaluate(seed_id) -> (value, cost) must be deterministic; seed_id is
    (seed, 0, i) for i = 0..N-1.
    """
    if N < 2:
        raise ValueError("need at least 2 samples")
    stats = LevelStats(level=0, h=0.0)
    for i in range(N):
        value, cost = evaluate((int(seed), 0, i))
        stats.add(value, value, cost)
    return stats.mean_y, stats.var_y, stats.cost_units


def mc_run(est, level, N, workers=1, record_seconds=False):
    """Standard MC of Q at a single mesh level using the estimator's QoI."""
    if N < 2:
        raise ValueError("need at least 2 samples")
    stats = LevelStats(level=level, h=est.mesh(level).h)
    t0 = time.perf_counter()
    for _, q_fine, cost in run_samples(
            est, [(level, i) for i in range(N)], workers):
        stats.add(q_fine, q_fine, cost)
    if record_seconds:
        stats.cost_seconds = time.perf_counter() - t0
    return stats


def optimal_allocation(variances, hs, eps):
    """Variance-optimal sample counts for a sampling budget of eps^2/2.

    N_l = ceil(2 eps^-2 sqrt(s2_l h_l) sum_k sqrt(s2_k / h_k)), min 1.
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    s2 = np.asarray(variances, dtype=float)
    h = np.asarray(hs, dtype=float)
    if np.any(s2 < 0) or np.any(h <= 0):
        raise ValueError("variances must be >= 0 and mesh sizes > 0")
    total = np.sqrt(s2 / h).sum()
    counts = np.ceil(2.0 / eps**2 * np.sqrt(s2 * h) * total)
    return np.maximum(counts, 1).astype(int)


def fit_rates(levels):
    """(alpha, beta, gamma) from log2 regressions over levels l >= 1.

    alpha: decay of |mean Y_l|; beta: decay of var Y_l; gamma: growth of
    cost per sample.  Needs at least two correction levels.
    """
    corr = [s for s in levels if s.level >= 1 and s.n_samples > 0]
    if len(corr) < 2:
        raise ValueError("rate fit needs at least two correction levels")
    ls = np.array([s.level for s in corr], dtype=float)
    tiny = 1e-300
    alpha = -_slope(ls, np.log2([abs(s.mean_y) + tiny for s in corr]))
    beta = -_slope(ls, np.log2([s.var_y + tiny for s in corr]))
    gamma = _slope(ls, np.log2([s.cost_units / s.n_samples for s in corr]))
    return alpha, beta, gamma


def _slope(x, y):
    return float(np.polyfit(x, y, 1)[0])


def mlmc_run(est, eps, pilot=PILOT_DEFAULT, level_cap=LEVEL_CAP_DEFAULT,
             workers=1, record_seconds=False):
    """Adaptive MLMC: pilot sampling, optimal allocation, bias-driven levels.

    Terminates when the estimated sampling error and the Richardson bias
    proxy both fit in their eps^2/2 budget halves, or the level cap is hit
    (the result is then flagged as not converged).
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    if pilot < 10:
        raise ValueError("pilot size must be >= 10")
    levels = [LevelStats(level=0, h=est.mesh(0).h),
              LevelStats(level=1, h=est.mesh(1).h)]
    t0 = time.perf_counter()

    def top_up(targets):
        tasks = []
        for stats, target in zip(levels, targets):
            tasks.extend((stats.level, i)
                         for i in range(stats.n_samples, target))
        if not tasks:
            return
        results = run_samples(est, tasks, workers)
        for (level, _), (y, q, cost) in zip(tasks, results):
            levels[level].add(y, q, cost)

    converged = False
    while True:
        top_up([max(pilot, s.n_samples) for s in levels])
        counts = optimal_allocation([s.var_y for s in levels],
                                    [s.h for s in levels], eps)
        top_up([max(int(c), s.n_samples) for c, s in zip(counts, levels)])

        corr = levels[1:]
        if len(corr) >= 2:
            ls = np.array([s.level for s in corr], dtype=float)
            means = np.log2([abs(s.mean_y) + 1e-300 for s in corr])
            alpha = max(-_slope(ls, means), ALPHA_FLOOR)
        else:
            alpha = max(ALPHA_FLOOR, 1.0)
        bias = abs(levels[-1].mean_y) / (2.0**alpha - 1.0)
        if bias <= eps / np.sqrt(2.0):
            converged = True
            break
        if len(levels) - 1 >= level_cap:
            break
        levels.append(LevelStats(level=len(levels),
                                 h=est.mesh(len(levels)).h))

    if record_seconds:
        elapsed = time.perf_counter() - t0
        total_units = sum(s.cost_units for s in levels)
        for s in levels:
            s.cost_seconds = elapsed * s.cost_units / total_units

    estimate = sum(s.mean_y for s in levels)
    sampling_error = float(np.sqrt(
        sum(s.var_y / s.n_samples for s in levels)))
    try:
        alpha_hat, beta_hat, gamma_hat = fit_rates(levels)
    except ValueError:
        alpha_hat = beta_hat = gamma_hat = float("nan")
    return MlmcResult(estimate=estimate, sampling_error=sampling_error,
                      eps=eps, final_level=len(levels) - 1,
                      alpha_hat=alpha_hat, beta_hat=beta_hat,
                      gamma_hat=gamma_hat, converged=converged,
                      qoi_kind=est.qoi_kind.kind, levels=levels)


def dump_mlmc_csv(result, path):
    """Per-level table plus a one-line summary section."""
    with open(path, "w") as f:
        f.write("level,h,N,mean_Y,var_Y,mean_Q,var_Q,cost_units,cost_seconds\n")
        for s in result.levels:
            f.write(f"{s.level},{s.h!r},{s.n_samples},{s.mean_y!r},"
                    f"{s.var_y!r},{s.mean_q!r},{s.var_q!r},"
                    f"{s.cost_units!r},{s.cost_seconds!r}\n")
        f.write("[summary]\n")
        f.write("qoi,eps,estimate,sampling_error,L,alpha_hat,beta_hat,gamma_hat\n")
        f.write(f"{result.qoi_kind},{result.eps!r},{result.estimate!r},"
                f"{result.sampling_error!r},{result.final_level},"
                f"{result.alpha_hat!r},{result.beta_hat!r},"
                f"{result.gamma_hat!r}\n")
