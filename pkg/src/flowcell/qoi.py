"""Scalar quantities of interest extracted from a mixed solution.

Norms use quadrature rules that are exact for the piecewise-polynomial
integrands (edge-midpoint rule for quadratics, centroid rule for linears),
so every value here is an exact integral of the discrete function.
Particle travel time integrates dx/dt = q_h in closed form element by
element: inside a triangle the lowest-order Raviart-Thomas velocity is
v(x) = alpha + beta*x with a single scalar beta, so each linear coordinate
along an edge normal evolves exponentially (or linearly when beta ~ 0).
"""

from dataclasses import dataclass

import numpy as np

from flowcell.mesh import locate_element
from flowcell.mfem import element_velocity_coeffs

VELOCITY_L2 = "velocity_l2"
VELOCITY_HDIV = "velocity_hdiv"
PRESSURE_L2 = "pressure_l2"
RECOVERED_PRESSURE_L2 = "recovered_pressure_l2"
K_EFF = "k_eff"
TRAVEL_TIME = "travel_time"
KINDS = (VELOCITY_L2, VELOCITY_HDIV, PRESSURE_L2, RECOVERED_PRESSURE_L2,
         K_EFF, TRAVEL_TIME)

EXITED = "exited"
STAGNATED = "stagnated"
MAX_STEPS = "max_steps"

STAGNATION_TOL = 1e-13   # |v| below this (flow-cell flux scale 1) stalls
VERTEX_TOL = 1e-12       # crossing point this close to a vertex gets nudged
NUDGE_FACTOR = 1e-10     # nudge distance = NUDGE_FACTOR * h


@dataclass(frozen=True)
class QoiKind:
    """A named scalar quantity; travel_time additionally carries its start."""

    kind: str
    x0: tuple | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown qoi kind {self.kind!r}")
        if self.kind == TRAVEL_TIME:
            if self.x0 is None:
                raise ValueError("travel_time requires a start point x0")
            x, y = self.x0
            if not (0.0 <= x <= 1.0 and 0.0 <= y <= 1.0):
                raise ValueError(f"start point {self.x0} outside the domain")
        elif self.x0 is not None:
            raise ValueError(f"x0 is only valid for travel_time, not {self.kind}")


@dataclass
class TrackResult:
    travel_time: float
    exit_point: np.ndarray | None
    path: list          # ordered (element, entry point, time increment)
    termination: str    # exited | stagnated | max_steps


class TrackingError(RuntimeError):
    """A particle track failed to exit (stagnated or cycled)."""


def _edge_midpoints_local(mesh):
    """Midpoint of the edge opposite each local vertex, (nelem, 3, 2)."""
    p = mesh.vertices[mesh.elements]
    mid = np.empty_like(p)
    mid[:, 0] = 0.5 * (p[:, 1] + p[:, 2])
    mid[:, 1] = 0.5 * (p[:, 0] + p[:, 2])
    mid[:, 2] = 0.5 * (p[:, 0] + p[:, 1])
    return mid


def velocity_norms(mesh, solution):
    """(L2 norm of q_h, H(div) norm of q_h), both integrated exactly.

    |q_h|^2 is quadratic per element, so the edge-midpoint rule is exact;
    div q_h is constant (2*beta) per element.
    """
    alpha, beta = element_velocity_coeffs(mesh, solution.edge_flux)
    mid = _edge_midpoints_local(mesh)
    q_mid = alpha[:, None, :] + beta[:, None, None] * mid
    l2_sq = (mesh.element_area / 3.0) * (q_mid**2).sum(axis=(1, 2))
    div_sq = mesh.element_area * (2.0 * beta) ** 2
    l2 = float(np.sqrt(l2_sq.sum()))
    hdiv = float(np.sqrt(l2_sq.sum() + div_sq.sum()))
    return l2, hdiv


def pressure_norms(mesh, solution):
    """(L2 norm of the P0 pressure, L2 norm of the recovered linear pressure).

    The recovered pressure is linear per element with known edge-midpoint
    values, so the edge-midpoint rule integrates its square exactly.
    """
    p0_sq = mesh.element_area * solution.pressure**2
    cr_sq = (mesh.element_area / 3.0) * (solution.recovered_pressure**2).sum(axis=1)
    return float(np.sqrt(p0_sq.sum())), float(np.sqrt(cr_sq.sum()))


def effective_permeability(mesh, solution):
    """Integral of the first velocity component over the unit square.

    The integrand is linear per element, so the centroid rule is exact.
    """
    alpha, beta = element_velocity_coeffs(mesh, solution.edge_flux)
    cx = mesh.element_centroids()[:, 0]
    q1 = alpha[:, 0] + beta * cx
    return float((mesh.element_area * q1).sum())


def _crossing_time(u0, beta, w0):
    """Earliest time the linear coordinate w (w0 <= 0, w' = u0 + beta*w)
    reaches 0, or None if it never does.  Requires u0 > 0 at the plane."""
    if u0 <= 0.0:
        return None
    if w0 >= 0.0:
        return 0.0
    r = beta * w0 / u0
    if 1.0 + r <= 0.0:
        return None           # velocity reverses before reaching the plane
    if abs(r) < 1e-12 or beta == 0.0:
        return float(-w0 / u0)
    return float(-np.log1p(r) / beta)


def _advance(x, alpha, beta, t):
    """Exact position after time t under v(x) = alpha + beta*x."""
    if beta == 0.0:
        return x + alpha * t
    return x + (beta * x + alpha) * (np.expm1(beta * t) / beta)


def travel_time(mesh, solution, x0, max_steps=None):
    """Track a particle from x0 with the discrete Darcy velocity.

    Advances element by element; within each element the trajectory is
    integrated exactly and the exit is the earliest positive crossing of
    an edge with outward normal velocity.  Porosity is 1.  Particles
    started on the outflow boundary have travel time 0 by convention.
    """
    x = np.asarray(x0, dtype=float)
    if not (0.0 <= x[0] <= 1.0 and 0.0 <= x[1] <= 1.0):
        raise ValueError(f"start point {x0} outside the domain")
    if x[0] >= 1.0 - VERTEX_TOL:
        return TrackResult(travel_time=0.0, exit_point=x.copy(), path=[],
                           termination=EXITED)
    if max_steps is None:
        max_steps = 100 * mesh.n * mesh.n

    alpha, beta = element_velocity_coeffs(mesh, solution.edge_flux)
    nudge = NUDGE_FACTOR * mesh.h
    element = locate_element(mesh, x)
    tau = 0.0
    path = []

    for _ in range(max_steps):
        a_t, b_t = alpha[element], beta[element]
        v = a_t + b_t * x
        if np.hypot(v[0], v[1]) < STAGNATION_TOL:
            return TrackResult(travel_time=tau, exit_point=None, path=path,
                               termination=STAGNATED)

        best_t, best_edge = None, -1
        for k in range(3):
            e = mesh.element_edges[element, k]
            n_out = mesh.element_edge_signs[element, k] * mesh.edge_normals[e]
            c = float(n_out @ mesh.edge_midpoints[e])
            w0 = float(n_out @ x) - c
            u0 = float(n_out @ a_t) + b_t * c
            t = _crossing_time(u0, b_t, w0)
            if t is not None and (best_t is None or t < best_t):
                best_t, best_edge = t, e
        if best_t is None:
            return TrackResult(travel_time=tau, exit_point=None, path=path,
                               termination=STAGNATED)

        x_new = _advance(x, a_t, b_t, best_t)
        tau += best_t
        path.append((element, x.copy(), best_t))

        if mesh.edge_tags[best_edge] != 0:      # boundary edge: done
            return TrackResult(travel_time=tau, exit_point=x_new, path=path,
                               termination=EXITED)

        near_vertex = min(
            np.linalg.norm(x_new - mesh.vertices[mesh.edges[best_edge, 0]]),
            np.linalg.norm(x_new - mesh.vertices[mesh.edges[best_edge, 1]]),
        ) < VERTEX_TOL
        if near_vertex:
            v_new = a_t + b_t * x_new
            speed = np.hypot(v_new[0], v_new[1])
            if speed < STAGNATION_TOL:
                return TrackResult(travel_time=tau, exit_point=None, path=path,
                                   termination=STAGNATED)
            x_try = x_new + nudge * v_new / speed
            if not (0.0 <= x_try[0] <= 1.0 and 0.0 <= x_try[1] <= 1.0):
                # Nudge leaves the domain: the vertex lies on the boundary.
                return TrackResult(travel_time=tau, exit_point=x_new,
                                   path=path, termination=EXITED)
            x = x_try
            element = locate_element(mesh, x)
        else:
            pair = mesh.edge_elements[best_edge]
            element = int(pair[1] if pair[0] == element else pair[0])
            x = x_new

    return TrackResult(travel_time=tau, exit_point=None, path=path,
                       termination=MAX_STEPS)


def evaluate_qoi(qoi, mesh, solution):
    """Scalar value of a QoiKind; tracking failures raise TrackingError."""
    if qoi.kind == VELOCITY_L2:
        return velocity_norms(mesh, solution)[0]
    if qoi.kind == VELOCITY_HDIV:
        return velocity_norms(mesh, solution)[1]
    if qoi.kind == PRESSURE_L2:
        return pressure_norms(mesh, solution)[0]
    if qoi.kind == RECOVERED_PRESSURE_L2:
        return pressure_norms(mesh, solution)[1]
    if qoi.kind == K_EFF:
        return effective_permeability(mesh, solution)
    result = travel_time(mesh, solution, qoi.x0)
    if result.termination != EXITED:
        raise TrackingError(
            f"particle track from {qoi.x0} terminated as {result.termination}")
    return result.travel_time


def dump_track_csv(result, path):
    """Debug dump: one row per element entry, cumulative time at entry."""
    with open(path, "w") as f:
        f.write("step,element,x,y,t\n")
        t = 0.0
        for step, (element, point, dt) in enumerate(result.path):
            f.write(f"{step},{element},{point[0]!r},{point[1]!r},{t!r}\n")
            t += dt
