"""Uniform triangulations of the unit square with RT0/P0/multiplier DOF maps.

Each of the n x n squares is split by the diagonal from its lower-left to
its upper-right corner.  Vertices are numbered row-major, elements and
edges cell-by-cell, so all numberings are deterministic functions of n.
"""

from dataclasses import dataclass, field

import numpy as np

# Boundary tags.
INTERIOR = 0
DIRICHLET_IN = 1   # x1 = 0 (inflow)
DIRICHLET_OUT = 2  # x1 = 1 (outflow)
NEUMANN = 3        # x2 in {0, 1} (no-flow)


@dataclass
class Mesh:
    """Triangulation of (0,1)^2 into 2*n^2 positively oriented triangles.

    Immutable after construction; shared read access is safe.
    """

    n: int
    vertices: np.ndarray        # (nvert, 2)
    elements: np.ndarray        # (nelem, 3) vertex indices, CCW
    edges: np.ndarray           # (nedge, 2) vertex indices
    edge_normals: np.ndarray    # (nedge, 2) fixed global unit normal
    element_edges: np.ndarray   # (nelem, 3) edge index opposite local vertex i
    element_edge_signs: np.ndarray  # (nelem, 3) +1 if global normal is outward
    edge_tags: np.ndarray       # (nedge,) boundary tags
    edge_elements: np.ndarray   # (nedge, 2) incident elements, -1 if boundary
    interior_edges: np.ndarray = field(default=None)
    edge_lengths: np.ndarray = field(default=None)
    edge_midpoints: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.interior_edges is None:
            self.interior_edges = np.flatnonzero(self.edge_tags == INTERIOR)
        if self.edge_lengths is None:
            vec = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
            self.edge_lengths = np.linalg.norm(vec, axis=1)
        if self.edge_midpoints is None:
            self.edge_midpoints = 0.5 * (
                self.vertices[self.edges[:, 0]] + self.vertices[self.edges[:, 1]]
            )

    @property
    def h(self):
        return 1.0 / self.n

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    @property
    def num_elements(self):
        return self.elements.shape[0]

    @property
    def num_edges(self):
        return self.edges.shape[0]

    @property
    def element_area(self):
        return 0.5 * self.h * self.h

    def element_centroids(self):
        return self.vertices[self.elements].mean(axis=1)


def build_uniform_mesh(n):
    """Build the uniform n x n criss-cross mesh of the unit square.

    Counts: (n+1)^2 vertices, 2n^2 elements, 3n^2+2n edges of which
    3n^2-2n are interior.
    """
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise ValueError(f"mesh subdivision n must be a positive integer, got {n!r}")
    n = int(n)
    h = 1.0 / n

    ix, iy = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="xy")
    vertices = np.column_stack([ix.ravel() * h, iy.ravel() * h])

    def vid(ix, iy):
        return iy * (n + 1) + ix

    cx, cy = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    cx, cy = cx.ravel(), cy.ravel()   # cell index = cy*n + cx
    v00 = vid(cx, cy)
    v10 = vid(cx + 1, cy)
    v01 = vid(cx, cy + 1)
    v11 = vid(cx + 1, cy + 1)

    nelem = 2 * n * n
    elements = np.empty((nelem, 3), dtype=np.int64)
    elements[0::2] = np.column_stack([v00, v10, v11])  # lower triangle
    elements[1::2] = np.column_stack([v00, v11, v01])  # upper triangle

    # Edge numbering: horizontal block, then vertical, then diagonal.
    n_h = n * (n + 1)
    n_v = n * (n + 1)
    hx, hy = np.meshgrid(np.arange(n), np.arange(n + 1), indexing="xy")
    h_edges = np.column_stack([vid(hx.ravel(), hy.ravel()),
                               vid(hx.ravel() + 1, hy.ravel())])
    vx, vy = np.meshgrid(np.arange(n + 1), np.arange(n), indexing="xy")
    v_edges = np.column_stack([vid(vx.ravel(), vy.ravel()),
                               vid(vx.ravel(), vy.ravel() + 1)])
    d_edges = np.column_stack([v00, v11])
    edges = np.vstack([h_edges, v_edges, d_edges])

    def h_eid(ix, iy):
        return iy * n + ix

    def v_eid(ix, iy):
        return n_h + iy * (n + 1) + ix

    def d_eid(cx, cy):
        return n_h + n_v + cy * n + cx

    # Edge i of an element sits opposite local vertex i.
    element_edges = np.empty((nelem, 3), dtype=np.int64)
    element_edges[0::2] = np.column_stack(
        [v_eid(cx + 1, cy), d_eid(cx, cy), h_eid(cx, cy)])
    element_edges[1::2] = np.column_stack(
        [h_eid(cx, cy + 1), v_eid(cx, cy), d_eid(cx, cy)])

    # Edge -> incident elements (lower index first).
    nedge = edges.shape[0]
    edge_elements = np.full((nedge, 2), -1, dtype=np.int64)
    for t in range(nelem):
        for e in element_edges[t]:
            if edge_elements[e, 0] < 0:
                edge_elements[e, 0] = t
            else:
                edge_elements[e, 1] = t

    # Global unit normal: rotate tangent by -90 deg, then orient away from
    # the lower-indexed incident element (outward on the boundary).
    tang = vertices[edges[:, 1]] - vertices[edges[:, 0]]
    tang /= np.linalg.norm(tang, axis=1, keepdims=True)
    normals = np.column_stack([tang[:, 1], -tang[:, 0]])
    midpoints = 0.5 * (vertices[edges[:, 0]] + vertices[edges[:, 1]])
    centroids = vertices[elements].mean(axis=1)
    away = midpoints - centroids[edge_elements[:, 0]]
    flip = np.einsum("ij,ij->i", normals, away) < 0
    normals[flip] *= -1.0

    # Per-element edge signs: +1 where the global normal is outward.
    signs = np.empty((nelem, 3), dtype=np.int64)
    for k in range(3):
        eids = element_edges[:, k]
        away = midpoints[eids] - centroids
        signs[:, k] = np.where(
            np.einsum("ij,ij->i", normals[eids], away) > 0, 1, -1)

    edge_tags = np.full(nedge, INTERIOR, dtype=np.int64)
    boundary = edge_elements[:, 1] < 0
    on_x0 = boundary & (np.abs(midpoints[:, 0]) < 1e-14)
    on_x1 = boundary & (np.abs(midpoints[:, 0] - 1.0) < 1e-14)
    on_y = boundary & ~on_x0 & ~on_x1
    edge_tags[on_x0] = DIRICHLET_IN
    edge_tags[on_x1] = DIRICHLET_OUT
    edge_tags[on_y] = NEUMANN

    return Mesh(n=n, vertices=vertices, elements=elements, edges=edges,
                edge_normals=normals, element_edges=element_edges,
                element_edge_signs=signs, edge_tags=edge_tags,
                edge_elements=edge_elements)


def mesh_hierarchy(n0, L):
    """Meshes for levels 0..L with n_l = n0 * 2^l (nested vertices)."""
    if not isinstance(n0, (int, np.integer)) or n0 < 1:
        raise ValueError(f"n0 must be a positive integer, got {n0!r}")
    if not isinstance(L, (int, np.integer)) or L < 0:
        raise ValueError(f"level count L must be >= 0, got {L!r}")
    return [build_uniform_mesh(n0 * 2**level) for level in range(L + 1)]


def barycentric_coordinates(mesh, element, x):
    """Barycentric coordinates of point x in the given element."""
    p = mesh.vertices[mesh.elements[element]]
    t = np.column_stack([p[1] - p[0], p[2] - p[0]])
    lam12 = np.linalg.solve(t, np.asarray(x, dtype=float) - p[0])
    return np.array([1.0 - lam12.sum(), lam12[0], lam12[1]])


def locate_element(mesh, x, tol=1e-12):
    """Index of an element whose closed triangle contains x.

    Points on shared edges or vertices resolve to the lowest incident
    element index.
    """
    x = np.asarray(x, dtype=float)
    if x[0] < -tol or x[0] > 1 + tol or x[1] < -tol or x[1] > 1 + tol:
        raise ValueError(f"point {x} lies outside the unit square")
    n = mesh.n
    cx0 = min(max(int(np.floor(x[0] * n)), 0), n - 1)
    cy0 = min(max(int(np.floor(x[1] * n)), 0), n - 1)
    candidates = []
    for cy in range(max(cy0 - 1, 0), min(cy0 + 2, n)):
        for cx in range(max(cx0 - 1, 0), min(cx0 + 2, n)):
            base = 2 * (cy * n + cx)
            candidates.extend((base, base + 1))
    for t in sorted(candidates):
        if barycentric_coordinates(mesh, t, x).min() >= -tol:
            return t
    raise RuntimeError(f"failed to locate {x} in mesh with n={n}")


def dump_mesh_csv(mesh, path):
    """Sectioned CSV dump: vertices, elements, edges (with tags)."""
    tag_names = {INTERIOR: "interior", DIRICHLET_IN: "dirichlet_in",
                 DIRICHLET_OUT: "dirichlet_out", NEUMANN: "neumann"}
    with open(path, "w") as f:
        f.write("[vertices]\nid,x,y\n")
        for i, (x, y) in enumerate(mesh.vertices):
            f.write(f"{i},{x!r},{y!r}\n")
        f.write("[elements]\nid,v0,v1,v2\n")
        for i, (a, b, c) in enumerate(mesh.elements):
            f.write(f"{i},{a},{b},{c}\n")
        f.write("[edges]\nid,v0,v1,tag\n")
        for i, ((a, b), tag) in enumerate(zip(mesh.edges, mesh.edge_tags)):
            f.write(f"{i},{a},{b},{tag_names[int(tag)]}\n")
