"""Samplers for the lognormal permeability a = exp(g).

g is a mean-zero stationary Gaussian field with exponential or Matern
covariance, sampled at the vertices of a uniform mesh either exactly by
circulant embedding (FFT) or approximately by a truncated Karhunen-Loeve
expansion built with a Nystrom discretisation of the covariance operator.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gamma as gamma_fn, kv

EXPONENTIAL = "exponential"
MATERN = "matern"

# Relative eigenvalue-clipping tolerance for the circulant embedding.
CLIP_TOL = 1e-10
MAX_PAD_FACTOR = 8


@dataclass(frozen=True)
class CovarianceSpec:
    """Stationary covariance kernel: exponential or Matern."""

    kind: str
    sigma2: float = 1.0
    lam: float = 1.0
    nu: float | None = None

    def __post_init__(self):
        if self.kind not in (EXPONENTIAL, MATERN):
            raise ValueError(f"unknown covariance kind {self.kind!r}")
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be > 0")
        if self.lam <= 0:
            raise ValueError("lambda must be > 0")
        if self.kind == MATERN and (self.nu is None or self.nu <= 0):
            raise ValueError("matern covariance requires nu > 0")
        if self.kind == EXPONENTIAL and self.nu is not None:
            raise ValueError("nu is only valid for the matern covariance")

    @property
    def scaled_length(self):
        """Matern scaled correlation length lam/(2*sqrt(nu))."""
        if self.kind != MATERN:
            raise ValueError("scaled_length is defined for matern only")
        return self.lam / (2.0 * np.sqrt(self.nu))


def covariance(spec, r):
    """Evaluate the covariance kernel at distances r >= 0 (vectorized)."""
    r = np.asarray(r, dtype=float)
    if spec.kind == EXPONENTIAL:
        return spec.sigma2 * np.exp(-r / spec.lam)
    lt = spec.scaled_length
    nu = spec.nu
    s = r / lt
    with np.errstate(invalid="ignore"):
        val = spec.sigma2 * (2.0 ** (1 - nu) / gamma_fn(nu)) * s**nu * kv(nu, s)
    return np.where(s == 0.0, spec.sigma2, val)


@dataclass
class FieldRealization:
    """One permeability sample on a given mesh level.

    element_values are exp of the vertex-averaged log field, hence always
    positive, and a pure function of vertex_log_values and the mesh.
    """

    level: int
    n: int
    vertex_log_values: np.ndarray
    element_values: np.ndarray
    seed_id: tuple
    embedding_clipped: bool = False


def rng_for(seed_id, purpose=0):
    """Counter-based generator keyed by (master seed, level, sample, purpose)."""
    master, level, sample = seed_id
    ss = np.random.SeedSequence(entropy=int(master) & (2**64 - 1),
                                spawn_key=(int(level), int(sample), int(purpose)))
    return np.random.Generator(np.random.Philox(ss))


def element_values_from_vertices(mesh, vertex_log_values):
    """Geometric mean over element vertices: a|_T = exp(mean of g at vertices)."""
    g = vertex_log_values[mesh.elements].mean(axis=1)
    return np.exp(g)


def _make_realization(mesh, g, seed_id, level=None, clipped=False):
    if level is None:
        level = 0
    return FieldRealization(level=level, n=mesh.n,
                            vertex_log_values=np.asarray(g, dtype=float),
                            element_values=element_values_from_vertices(
                                mesh, np.asarray(g, dtype=float)),
                            seed_id=tuple(seed_id),
                            embedding_clipped=clipped)


def _embedding_eigenvalues(spec, n, pad):
    """FFT eigenvalues of the covariance on a pad*(n+1) periodic grid."""
    m = pad * (n + 1)
    h = 1.0 / n
    k = np.arange(m)
    lag = np.minimum(k, m - k) * h
    r = np.hypot(lag[:, None], lag[None, :])
    lam = np.fft.fft2(covariance(spec, r)).real
    return lam, m


def circulant_eigenvalues(spec, n):
    """Eigenvalues for the torus embedding, doubling the padding until PSD.

    Returns (eigenvalues clipped at zero, torus size, clipped flag).
    """
    pad = 2
    while True:
        lam, m = _embedding_eigenvalues(spec, n, pad)
        min_eig = lam.min()
        if min_eig >= -CLIP_TOL * spec.sigma2 or pad >= MAX_PAD_FACTOR:
            clipped = min_eig < -CLIP_TOL * spec.sigma2
            return np.maximum(lam, 0.0), m, clipped
        pad *= 2


def sample_circulant(spec, mesh, seed_id, level=None, purpose=0, _cache={}):
    """Exact stationary Gaussian sample at the mesh vertices via FFT.

    Deterministic given (seed_id, purpose); purpose > 0 selects an
    independent retry stream for the same nominal sample.  The embedding
    eigenvalues are cached per (spec, n) since they are sample-independent.
    """
    key = (spec, mesh.n)
    if key not in _cache:
        _cache[key] = circulant_eigenvalues(spec, mesh.n)
    lam, m, clipped = _cache[key]
    rng = rng_for(seed_id, purpose)
    eps = rng.standard_normal((m, m)) + 1j * rng.standard_normal((m, m))
    y = np.fft.fft2(np.sqrt(lam) * eps) / m
    grid = y.real[: mesh.n + 1, : mesh.n + 1]   # grid[iy, ix]
    g = grid.ravel()                            # row-major = vertex order
    return _make_realization(mesh, g, seed_id, level=level, clipped=clipped)


@dataclass
class KleBasis:
    """Truncated KL eigenpairs from a Nystrom (midpoint-rule) discretisation."""

    spec: CovarianceSpec
    K: int
    eigenvalues: np.ndarray    # (K,) decreasing, > 0
    nodes: np.ndarray          # (m*m, 2) midpoint collocation nodes
    node_values: np.ndarray    # (m*m, K) eigenfunction values at the nodes
    weight: float              # quadrature weight 1/m^2
    total_variance: float      # sigma2 * |D|
    _eval_cache: dict = field(default_factory=dict, repr=False)

    @property
    def captured_variance_ratio(self):
        return float(self.eigenvalues.sum() / self.total_variance)

    def evaluate(self, points):
        """Nystrom extension of the eigenfunctions to arbitrary points."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        d = np.linalg.norm(points[:, None, :] - self.nodes[None, :, :], axis=2)
        rho = covariance(self.spec, d)
        return (rho @ self.node_values) * (self.weight / self.eigenvalues)

    def mode_matrix(self, mesh):
        """Cached (nvert, K) matrix of sqrt(lambda_k) * phi_k at mesh vertices."""
        key = mesh.n
        if key not in self._eval_cache:
            phi = self.evaluate(mesh.vertices)
            self._eval_cache[key] = phi * np.sqrt(self.eigenvalues)
        return self._eval_cache[key]


def default_nystrom_resolution(spec):
    lt = spec.scaled_length if spec.kind == MATERN else spec.lam
    return max(32, int(np.ceil(4.0 / lt)))


def kle_build(spec, K, m=None):
    """First K eigenpairs of the covariance operator on the unit square.

    Midpoint-rule Nystrom discretisation on an m x m grid followed by a
    symmetric eigensolve of the equally-weighted kernel matrix.
    """
    if K < 1:
        raise ValueError("mode count K must be >= 1")
    if m is None:
        m = default_nystrom_resolution(spec)
    if K > m * m:
        raise ValueError(f"K={K} exceeds the m^2={m*m} collocation nodes")
    xs = (np.arange(m) + 0.5) / m
    gx, gy = np.meshgrid(xs, xs, indexing="xy")
    nodes = np.column_stack([gx.ravel(), gy.ravel()])
    d = np.linalg.norm(nodes[:, None, :] - nodes[None, :, :], axis=2)
    w = 1.0 / (m * m)
    # Equal weights make sqrt(W) K sqrt(W) just w * K: already symmetric.
    evals, evecs = np.linalg.eigh(w * covariance(spec, d))
    evals, evecs = evals[::-1], evecs[:, ::-1]
    if np.sum(evals > 0) < K:
        raise ValueError(f"only {np.sum(evals > 0)} positive eigenvalues, need {K}")
    lam_k = evals[:K]
    phi_k = evecs[:, :K] / np.sqrt(w)   # L2(D)-normalized at the nodes
    return KleBasis(spec=spec, K=K, eigenvalues=lam_k, nodes=nodes,
                    node_values=phi_k, weight=w,
                    total_variance=spec.sigma2)


def sample_kle(basis, mesh, seed_id, level=None, purpose=0):
    """g = sum_k sqrt(lambda_k) phi_k xi_k at the mesh vertices."""
    rng = rng_for(seed_id, purpose)
    xi = rng.standard_normal(basis.K)
    g = basis.mode_matrix(mesh) @ xi
    return _make_realization(mesh, g, seed_id, level=level)


def restrict_to_coarse(fine, coarse_mesh):
    """Same sample on a coarser nested mesh: copy shared vertex values."""
    if fine.n % coarse_mesh.n != 0:
        raise ValueError(
            f"fine n={fine.n} is not a multiple of coarse n={coarse_mesh.n}")
    r = fine.n // coarse_mesh.n
    nc, nf = coarse_mesh.n, fine.n
    iy, ix = np.divmod(np.arange((nc + 1) ** 2), nc + 1)
    fine_idx = (iy * r) * (nf + 1) + ix * r
    g = fine.vertex_log_values[fine_idx]
    out = _make_realization(coarse_mesh, g, fine.seed_id,
                            level=fine.level, clipped=fine.embedding_clipped)
    return out


def dump_field_csv(field_real, mesh, path):
    with open(path, "w") as f:
        f.write("vertex_id,x,y,log_a\n")
        for i, ((x, y), g) in enumerate(
                zip(mesh.vertices, field_real.vertex_log_values)):
            f.write(f"{i},{x!r},{y!r},{g!r}\n")
