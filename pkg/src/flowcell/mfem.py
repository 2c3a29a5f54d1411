"""Hybridized lowest-order Raviart-Thomas / P0 solver for the flow cell.

Velocity DOFs are normal fluxes through edges, measured against the fixed
global edge normal and normalized so the total flux of a basis function
through its edge is 1.  Static condensation eliminates per-element fluxes
and pressures, leaving a symmetric positive definite system for the
interior-edge Lagrange multipliers.  The recovered piecewise-linear
pressure takes the multiplier value at each edge midpoint
(Crouzeix-Raviart, lowest order).
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from flowcell.mesh import DIRICHLET_IN, DIRICHLET_OUT, INTERIOR, NEUMANN

CG_RTOL = 1e-12


@dataclass
class ProblemData:
    """Boundary pressures and sources; defaults are the flow cell."""

    u_in: float = 1.0    # Dirichlet value at x1 = 0
    u_out: float = 0.0   # Dirichlet value at x1 = 1
    f: float = 0.0       # scalar source, constant per element (div q = f)
    g: tuple = (0.0, 0.0)  # constant vector source in the velocity equation

    def dirichlet_value(self, tag):
        return self.u_in if tag == DIRICHLET_IN else self.u_out


@dataclass
class MixedSolution:
    edge_flux: np.ndarray           # (nedge,) single-valued, global normal
    pressure: np.ndarray            # (nelem,) P0 pressure
    multipliers: np.ndarray         # (nedge,) trace values on every edge
    recovered_pressure: np.ndarray  # (nelem, 3) values at local edge midpoints
    cg_iterations: int = 0
    residual: float = 0.0


class SolverError(RuntimeError):
    pass


def local_mass_base(mesh):
    """Coefficient-free local velocity mass matrices, (nelem, 3, 3).

    m_T[i,j] for a_T = 1; divide by a_T per sample.  Exact for the
    quadratic integrand via edge-midpoint quadrature.
    """
    p = mesh.vertices[mesh.elements]          # (nelem, 3, 2)
    area = mesh.element_area
    mid = np.empty_like(p)                    # midpoint of edge opposite vertex i
    mid[:, 0] = 0.5 * (p[:, 1] + p[:, 2])
    mid[:, 1] = 0.5 * (p[:, 0] + p[:, 2])
    mid[:, 2] = 0.5 * (p[:, 0] + p[:, 1])
    d = mid[:, :, None, :] - p[:, None, :, :]     # (nelem, quad k, vertex i, 2)
    dots = np.einsum("nkid,nkjd->nij", d, d)      # sum over quad points
    s = mesh.element_edge_signs
    return (area / 3.0) * dots * (s[:, :, None] * s[:, None, :]) / (4.0 * area**2)


def local_system(mesh, element, a_T):
    """LocalElementSystem for one element: (m_T, b_T, area, edge lengths)."""
    if not np.isfinite(a_T) or a_T <= 0:
        raise ValueError(f"coefficient must be positive and finite, got {a_T}")
    m_T = local_mass_base(mesh)[element] / a_T
    b_T = mesh.element_edge_signs[element].astype(float)
    lengths = mesh.edge_lengths[mesh.element_edges[element]]
    return m_T, b_T, mesh.element_area, lengths


class _Group:
    """Static condensation factors for elements sharing a Neumann pattern.

    With M = base/a_T, v = base^-1 s and c0 = s.v, the local elimination
    gives q = a_T P (G - S lam) + (f_T/c0) v and
    u = f_T/(a_T c0) - v.(G - S lam)/c0, where P = base^-1 - v v^T / c0.
    s^T P = 0 identically, so element mass balance holds for any
    multiplier vector; only the coefficient scales per sample.
    """

    def __init__(self, mesh, kidx, elems, interior, edge_to_int, full_base):
        self.kidx = kidx
        self.elems = elems
        base = full_base[np.ix_(elems, kidx, kidx)]
        self.sk = mesh.element_edge_signs[np.ix_(elems, kidx)].astype(float)
        binv = np.linalg.inv(base)
        self.v = np.einsum("nij,nj->ni", binv, self.sk)
        self.c0 = np.einsum("ni,ni->n", self.sk, self.v)
        self.P = binv - self.v[:, :, None] * self.v[:, None, :] / self.c0[:, None, None]
        self.SPS = self.sk[:, :, None] * self.P * self.sk[:, None, :]
        self.Sv = self.sk * self.v
        self.gidx = edge_to_int[mesh.element_edges[np.ix_(elems, kidx)]]
        self.row_mask = self.gidx >= 0              # interior kept edges
        self.pair_mask = self.row_mask[:, :, None] & self.row_mask[:, None, :]
        shape = self.pair_mask.shape
        self.coo_rows = np.broadcast_to(self.gidx[:, :, None], shape)[self.pair_mask]
        self.coo_cols = np.broadcast_to(self.gidx[:, None, :], shape)[self.pair_mask]
        self.interior = interior[np.ix_(elems, kidx)]


class _Workspace:
    """Field-independent solver data, cached per mesh."""

    def __init__(self, mesh):
        tags = mesh.edge_tags[mesh.element_edges]
        self.tags = tags
        keep = tags != NEUMANN
        interior = tags == INTERIOR
        self.edge_to_int = np.full(mesh.num_edges, -1, dtype=np.int64)
        self.edge_to_int[mesh.interior_edges] = np.arange(len(mesh.interior_edges))
        full_base = local_mass_base(mesh)
        self.groups = []
        keys = (keep * np.array([1, 2, 4])).sum(axis=1)
        for key in np.unique(keys):
            elems = np.flatnonzero(keys == key)
            kidx = np.flatnonzero(keep[elems[0]])
            self.groups.append(_Group(mesh, kidx, elems, interior,
                                      self.edge_to_int, full_base))
        # Owner side and local index of every edge for flux extraction.
        owner = mesh.edge_elements[:, 0]
        loc = np.argmax(mesh.element_edges[owner] ==
                        np.arange(mesh.num_edges)[:, None], axis=1)
        self.edge_owner = owner
        self.edge_owner_loc = loc
        # Neumann-edge trace recovery data.
        neu = np.flatnonzero(mesh.edge_tags == NEUMANN)
        self.neu_edges = neu
        self.neu_owner = owner[neu]
        self.neu_loc = loc[neu]
        self.neu_base_rows = full_base[self.neu_owner, self.neu_loc, :]
        self.neu_sign = mesh.element_edge_signs[self.neu_owner, self.neu_loc]


_workspaces = {}


def _workspace(mesh):
    key = id(mesh)
    ws = _workspaces.get(key)
    if ws is None or ws[0] is not mesh:
        ws = (mesh, _Workspace(mesh))
        _workspaces[key] = ws
    return ws[1]


def _element_g_moments(mesh, g):
    """(g, phi_i)_T for a constant vector g: s_i * g . (centroid - p_i) / 2."""
    gx, gy = g
    if gx == 0.0 and gy == 0.0:
        return None
    p = mesh.vertices[mesh.elements]
    c = p.mean(axis=1, keepdims=True)
    return mesh.element_edge_signs * ((c - p) @ np.array([gx, gy])) / 2.0


def _element_source(mesh, f):
    """Integral of f over each element (f constant or callable at centroids)."""
    if callable(f):
        vals = np.asarray([f(x) for x in mesh.element_centroids()], dtype=float)
    else:
        vals = np.full(mesh.num_elements, float(f))
    return vals * mesh.element_area


def solve_hybridized(mesh, field_real, data=None, method="direct", rtol=CG_RTOL):
    """Solve one realization; returns the full MixedSolution.

    Equivalent to the non-hybridized RT0/P0 mixed solution: fluxes and
    pressures are recovered element-by-element from the multipliers.
    method: "direct" (sparse LU of the SPD multiplier system, default) or
    "cg" (Jacobi-preconditioned conjugate gradients).
    """
    if data is None:
        data = ProblemData()
    a = np.asarray(field_real.element_values, dtype=float)
    if a.shape[0] != mesh.num_elements:
        raise ValueError("field level does not match the mesh")
    if not np.all(np.isfinite(a)) or np.any(a <= 0):
        raise ValueError("field values must be positive and finite")

    ws = _workspace(mesh)
    nelem = mesh.num_elements

    # Element right-hand side G_i (vector source and Dirichlet data).
    g_mom = _element_g_moments(mesh, data.g)
    f_int = _element_source(mesh, data.f)
    g_rows = np.zeros((nelem, 3))
    if g_mom is not None:
        g_rows += g_mom
    dir_mask = (ws.tags == DIRICHLET_IN) | (ws.tags == DIRICHLET_OUT)
    if np.any(dir_mask):
        u_gamma = np.where(ws.tags == DIRICHLET_IN, data.u_in, data.u_out)
        g_rows -= np.where(dir_mask, u_gamma, 0.0)   # -int u_Gamma v.nu per edge

    n_int = len(mesh.interior_edges)
    rows, cols, vals = [], [], []
    rhs = np.zeros(n_int)
    for grp in ws.groups:
        a_g = a[grp.elems]
        # H = sum_T a_T S P S over interior edges (symmetric PSD per element).
        vals.append((a_g[:, None, None] * grp.SPS)[grp.pair_mask])
        rows.append(grp.coo_rows)
        cols.append(grp.coo_cols)
        G = g_rows[np.ix_(grp.elems, grp.kidx)]
        t = a_g[:, None] * (grp.sk * np.einsum("nij,nj->ni", grp.P, G))
        t += (f_int[grp.elems] / grp.c0)[:, None] * grp.Sv
        np.add.at(rhs, grp.gidx[grp.row_mask], t[grp.row_mask])

    H = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_int, n_int))

    iters = 0
    if method == "direct":
        lu = spla.splu(H.tocsc())
        lam_int = lu.solve(rhs)
        # Iterative refinement: edge-flux continuity (and hence local mass
        # conservation) is only as accurate as this residual.
        for _ in range(3):
            r = rhs - H @ lam_int
            res = float(np.linalg.norm(r))
            if res <= 1e-14 * max(np.linalg.norm(rhs), 1e-300):
                break
            lam_int = lam_int + lu.solve(r)
        res = float(np.linalg.norm(H @ lam_int - rhs))
    elif method == "cg":
        diag = H.diagonal()
        precond = spla.LinearOperator(H.shape, matvec=lambda x: x / diag)
        maxiter = int(20 * np.sqrt(n_int)) + 1000

        def count(_):
            nonlocal iters
            iters += 1

        lam_int, info = spla.cg(H, rhs, rtol=rtol, atol=0.0, maxiter=maxiter,
                                M=precond, callback=count)
        res = float(np.linalg.norm(H @ lam_int - rhs))
        if info != 0:
            raise SolverError(
                f"multiplier CG failed to converge in {maxiter} iterations "
                f"(residual {res:.3e}, seed_id {field_real.seed_id})")
    else:
        raise ValueError(f"unknown solve method {method!r}")

    multipliers = np.zeros(mesh.num_edges)
    multipliers[mesh.interior_edges] = lam_int
    multipliers[mesh.edge_tags == DIRICHLET_IN] = data.u_in
    multipliers[mesh.edge_tags == DIRICHLET_OUT] = data.u_out

    # Back-substitution per group.  Dirichlet data is already in the
    # element RHS; only the solved interior multipliers enter here.
    q_local = np.zeros((nelem, 3))
    pressure = np.zeros(nelem)
    for grp in ws.groups:
        a_g = a[grp.elems]
        eidx = mesh.element_edges[np.ix_(grp.elems, grp.kidx)]
        lam_t = np.where(grp.interior, multipliers[eidx], 0.0)
        g_eff = g_rows[np.ix_(grp.elems, grp.kidx)] - grp.sk * lam_t
        f_g = f_int[grp.elems]
        q = (a_g[:, None] * np.einsum("nij,nj->ni", grp.P, g_eff)
             + (f_g / grp.c0)[:, None] * grp.v)
        q_local[np.ix_(grp.elems, grp.kidx)] = q
        vg = np.einsum("ni,ni->n", grp.v, g_eff)
        pressure[grp.elems] = f_g / (a_g * grp.c0) - vg / grp.c0

    edge_flux = q_local[ws.edge_owner, ws.edge_owner_loc]
    edge_flux[mesh.edge_tags == NEUMANN] = 0.0

    # Neumann-edge trace from the adjacent element's first hybrid equation.
    if len(ws.neu_edges):
        t, i = ws.neu_owner, ws.neu_loc
        g_i = np.zeros(len(t)) if g_mom is None else g_mom[t, i]
        mq = np.einsum("nj,nj->n", ws.neu_base_rows / a[t, None], q_local[t])
        multipliers[ws.neu_edges] = pressure[t] - ws.neu_sign * (mq - g_i)

    recovered = recover_pressure(mesh, multipliers)
    return MixedSolution(edge_flux=edge_flux, pressure=pressure,
                         multipliers=multipliers, recovered_pressure=recovered,
                         cg_iterations=iters, residual=res)


def recover_pressure(mesh, edge_values):
    """Per-element linear pressure whose edge averages match edge_values.

    Lowest-order case: the linear function takes the edge value at each
    edge midpoint, stored in local (opposite-vertex) edge order.
    """
    return np.asarray(edge_values, dtype=float)[mesh.element_edges]


def element_velocity_coeffs(mesh, edge_flux):
    """Per-element affine velocity q(x) = alpha + beta * x.

    Returns (alpha: (nelem, 2), beta: (nelem,)); beta is scalar since RT0
    fields have the form alpha + beta*x componentwise.
    """
    q = np.asarray(edge_flux)[mesh.element_edges]     # (nelem, 3)
    s = mesh.element_edge_signs
    area = mesh.element_area
    coef = (s * q) / (2.0 * area)                     # weights of (x - p_i)
    beta = coef.sum(axis=1)
    p = mesh.vertices[mesh.elements]
    alpha = -(coef[:, :, None] * p).sum(axis=1)
    return alpha, beta


def divergence_residual(mesh, solution, data=None):
    """Per element |int div q_h - int f| / |T| (zero for the flow cell)."""
    if data is None:
        data = ProblemData()
    q = solution.edge_flux[mesh.element_edges]
    div_int = (mesh.element_edge_signs * q).sum(axis=1)
    return np.abs(div_int - _element_source(mesh, data.f)) / mesh.element_area


def boundary_flux(mesh, solution, tag):
    """Total flux through the edges with the given tag (global normals)."""
    idx = np.flatnonzero(mesh.edge_tags == tag)
    return float(solution.edge_flux[idx].sum())


def dump_solution_csv(mesh, solution, path):
    with open(path, "w") as f:
        f.write("[edge_flux]\nedge_id,flux\n")
        for i, q in enumerate(solution.edge_flux):
            f.write(f"{i},{q!r}\n")
        f.write("[pressure]\n")
        f.write("element_id,pressure,recovered_p0,recovered_p1,recovered_p2\n")
        for i in range(mesh.num_elements):
            u = solution.pressure[i]
            r0, r1, r2 = solution.recovered_pressure[i]
            f.write(f"{i},{u!r},{r0!r},{r1!r},{r2!r}\n")
