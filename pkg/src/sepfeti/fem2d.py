"""Structured linear-triangle finite elements on axis-aligned rectangles.

Provides meshes whose interface nodes are bit-identical across neighbouring
sub-domain meshes (coordinates are computed from one global integer lattice),
per-PC-mode stiffness assembly for scalar diffusion and plane-strain
elasticity, consistent loads, Dirichlet elimination, interface extraction
matrices and rigid-body modes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

_SIDES = ("left", "right", "bottom", "top")


class MeshError(ValueError):
    """Raised for invalid mesh requests (non-divisible h, degenerate cells)."""


def _lattice_coords(lo: float, hi: float, h: float) -> np.ndarray:
    """Node coordinates lo..hi in steps of h, taken from the global lattice.

    Both sub-domain meshes evaluate shared coordinates as the same product
    k*h, which keeps interface coordinates bit-identical.
    """
    n = (hi - lo) / h
    n_int = round(n)
    if n_int < 1 or abs(n - n_int) > 1e-9:
        raise MeshError(f"h={h} does not divide side [{lo}, {hi}]")
    k0 = round(lo / h)
    if abs(k0 * h - lo) < 1e-12 * max(1.0, abs(lo)):
        return (k0 + np.arange(n_int + 1)) * h
    return lo + np.arange(n_int + 1) * h


@dataclass
class Mesh:
    """Structured triangulation of one axis-aligned rectangle."""

    nodes: np.ndarray       # (n_nodes, 2)
    triangles: np.ndarray   # (n_tris, 3) CCW
    h: float
    rect: tuple[float, float, float, float]   # (x0, x1, y0, y1)
    nx: int
    ny: int
    side_edges: dict[str, np.ndarray] = field(default_factory=dict)
    edge_tags: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    def node_id(self, ix: int, iy: int) -> int:
        return iy * (self.nx + 1) + ix

    def nodes_on_side(self, side: str) -> np.ndarray:
        """Node ids along one rectangle side, ordered by the running coordinate."""
        if side not in _SIDES:
            raise ValueError(f"unknown side {side!r}")
        if side == "left":
            return np.array([self.node_id(0, iy) for iy in range(self.ny + 1)])
        if side == "right":
            return np.array([self.node_id(self.nx, iy) for iy in range(self.ny + 1)])
        if side == "bottom":
            return np.array([self.node_id(ix, 0) for ix in range(self.nx + 1)])
        return np.array([self.node_id(ix, self.ny) for ix in range(self.nx + 1)])

    def side_edge_list(self, side: str) -> np.ndarray:
        nodes = self.nodes_on_side(side)
        return np.stack([nodes[:-1], nodes[1:]], axis=1)


def build_rect_mesh(
    x_range: tuple[float, float], y_range: tuple[float, float], h: float
) -> Mesh:
    """Uniform right-triangle mesh of [x0,x1] x [y0,y1] with spacing h."""
    if h <= 0:
        raise MeshError("mesh size h must be positive")
    xs = _lattice_coords(x_range[0], x_range[1], h)
    ys = _lattice_coords(y_range[0], y_range[1], h)
    nx, ny = xs.size - 1, ys.size - 1
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    nodes = np.stack([X.ravel(), Y.ravel()], axis=1)

    tris = []
    for iy in range(ny):
        for ix in range(nx):
            a = iy * (nx + 1) + ix
            b = a + 1
            c = b + (nx + 1)
            d = a + (nx + 1)
            tris.append((a, b, c))
            tris.append((a, c, d))
    mesh = Mesh(
        nodes=nodes,
        triangles=np.array(tris, dtype=np.intp),
        h=h,
        rect=(x_range[0], x_range[1], y_range[0], y_range[1]),
        nx=nx,
        ny=ny,
    )
    for side in _SIDES:
        mesh.side_edges[side] = mesh.side_edge_list(side)
    _triangle_geometry(mesh)  # validates positive areas
    return mesh


def _triangle_geometry(mesh: Mesh) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-triangle shape-function gradients: returns (b, c, area)."""
    pts = mesh.nodes[mesh.triangles]
    x, y = pts[..., 0], pts[..., 1]
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    area = 0.5 * (x[:, 0] * b[:, 0] + x[:, 1] * b[:, 1] + x[:, 2] * b[:, 2])
    if np.any(area <= 1e-14 * mesh.h**2):
        raise MeshError("degenerate triangle (non-positive area)")
    return b, c, area


def _centroid_values(mesh: Mesh, nodal: np.ndarray | float) -> np.ndarray:
    if np.isscalar(nodal):
        return np.full(mesh.triangles.shape[0], float(nodal))
    nodal = np.asarray(nodal, dtype=float)
    if nodal.shape != (mesh.n_nodes,):
        raise ValueError("nodal field length must match node count")
    return nodal[mesh.triangles].mean(axis=1)


def assemble_diffusion_mode(mesh: Mesh, coeff_mode: np.ndarray | float) -> sp.csr_matrix:
    """Stiffness K[m,n] = integral of kappa_j grad N_m . grad N_n.

    The coefficient mode is interpolated at each triangle centroid
    (one-point rule), making assembly linear in the nodal mode field.
    """
    b, c, area = _triangle_geometry(mesh)
    kc = _centroid_values(mesh, coeff_mode)
    # element matrices (T,3,3)
    ke = (kc / (4.0 * area))[:, None, None] * (
        b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :]
    )
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    K = sp.coo_matrix(
        (ke.ravel(), (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes)
    ).tocsr()
    K.sum_duplicates()
    return K


def _plane_strain_d(nu: float) -> np.ndarray:
    if not 0.0 < nu < 0.5:
        raise ValueError(f"Poisson ratio nu={nu} must lie in (0, 0.5)")
    f = 1.0 / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return f * np.array(
        [
            [1.0 - nu, nu, 0.0],
            [nu, 1.0 - nu, 0.0],
            [0.0, 0.0, (1.0 - 2.0 * nu) / 2.0],
        ]
    )


def assemble_elasticity_mode(
    mesh: Mesh, modulus_mode: np.ndarray | float, nu: float
) -> sp.csr_matrix:
    """Plane-strain CST stiffness for one Young's-modulus PC mode field."""
    D = _plane_strain_d(nu)
    b, c, area = _triangle_geometry(mesh)
    ec = _centroid_values(mesh, modulus_mode)
    T = mesh.triangles.shape[0]
    B = np.zeros((T, 3, 6))
    inv2a = 1.0 / (2.0 * area)
    for i in range(3):
        B[:, 0, 2 * i] = b[:, i] * inv2a
        B[:, 1, 2 * i + 1] = c[:, i] * inv2a
        B[:, 2, 2 * i] = c[:, i] * inv2a
        B[:, 2, 2 * i + 1] = b[:, i] * inv2a
    ke = (ec * area)[:, None, None] * np.einsum("tki,kl,tlj->tij", B, D, B)
    dofs = np.empty((T, 6), dtype=np.intp)
    dofs[:, 0::2] = 2 * mesh.triangles
    dofs[:, 1::2] = 2 * mesh.triangles + 1
    rows = np.repeat(dofs, 6, axis=1).ravel()
    cols = np.tile(dofs, (1, 6)).ravel()
    n = 2 * mesh.n_nodes
    K = sp.coo_matrix((ke.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    K.sum_duplicates()
    return K


def mass_matrix(mesh: Mesh) -> sp.csr_matrix:
    """Consistent scalar mass matrix for linear triangles."""
    _, _, area = _triangle_geometry(mesh)
    me_ref = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0
    me = area[:, None, None] * me_ref
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    M = sp.coo_matrix(
        (me.ravel(), (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes)
    ).tocsr()
    M.sum_duplicates()
    return M


def assemble_load(
    mesh: Mesh,
    body: np.ndarray | float | None = None,
    traction: np.ndarray | float | None = None,
    traction_edges: np.ndarray | None = None,
    ncomp: int = 1,
) -> np.ndarray:
    """Consistent load vector from a body force and/or an edge traction.

    Body contributions use the centroid value times area/3 per vertex; edge
    tractions use the trapezoidal rule (t * L/2 at each edge endpoint).
    Scalar problems (ncomp=1) take scalar body/traction data; elasticity
    (ncomp=2) takes 2-vectors.
    """
    f = np.zeros(ncomp * mesh.n_nodes)
    if body is not None:
        _, _, area = _triangle_geometry(mesh)
        if ncomp == 1:
            fc = _centroid_values(mesh, body)
            contrib = (fc * area / 3.0)[:, None].repeat(3, axis=1)
            np.add.at(f, mesh.triangles.ravel(), contrib.ravel())
        else:
            bvec = np.asarray(body, dtype=float).reshape(2)
            for comp in range(2):
                contrib = (bvec[comp] * area / 3.0)[:, None].repeat(3, axis=1)
                np.add.at(f, 2 * mesh.triangles.ravel() + comp, contrib.ravel())
    if traction is not None:
        if traction_edges is None or len(traction_edges) == 0:
            raise ValueError("traction given but no tagged edges to apply it on")
        edges = np.asarray(traction_edges, dtype=np.intp)
        p = mesh.nodes[edges]           # (m, 2, 2)
        lengths = np.linalg.norm(p[:, 1] - p[:, 0], axis=1)
        if ncomp == 1:
            tval = float(traction)
            contrib = 0.5 * tval * lengths
            np.add.at(f, edges[:, 0], contrib)
            np.add.at(f, edges[:, 1], contrib)
        else:
            tvec = np.asarray(traction, dtype=float).reshape(2)
            for comp in range(2):
                contrib = 0.5 * tvec[comp] * lengths
                np.add.at(f, 2 * edges[:, 0] + comp, contrib)
                np.add.at(f, 2 * edges[:, 1] + comp, contrib)
    return f


def rigid_body_modes(mesh: Mesh, ncomp: int) -> np.ndarray:
    """Orthonormal null-space candidates of the unconstrained operator.

    Elasticity: two translations plus the infinitesimal rotation about the
    mesh centroid. Scalar diffusion: the constant mode.
    """
    n = mesh.n_nodes
    if ncomp == 1:
        return np.full((n, 1), 1.0 / np.sqrt(n))
    center = mesh.nodes.mean(axis=0)
    R = np.zeros((2 * n, 3))
    R[0::2, 0] = 1.0
    R[1::2, 1] = 1.0
    R[0::2, 2] = -(mesh.nodes[:, 1] - center[1])
    R[1::2, 2] = mesh.nodes[:, 0] - center[0]
    Q, _ = np.linalg.qr(R)
    # fix signs so the result is reproducible
    for j in range(Q.shape[1]):
        k = np.argmax(np.abs(Q[:, j]))
        if Q[k, j] < 0:
            Q[:, j] = -Q[:, j]
    return Q


@dataclass
class SubdomainProblem:
    """One sub-domain's discrete operators, after optional Dirichlet elimination."""

    mesh: Mesh
    ncomp: int
    K_modes: list[sp.csr_matrix]
    f: np.ndarray
    C: sp.csr_matrix                   # (n_free_dofs, M_I)
    R: np.ndarray                      # (n_free_dofs, n_rigid) orthonormal, possibly 0 cols
    floating: bool
    free_dofs: np.ndarray              # original dof ids kept (identity before elimination)
    dirichlet_dofs: np.ndarray

    @property
    def n_dofs(self) -> int:
        return self.f.shape[0]

    @property
    def n_interface(self) -> int:
        return self.C.shape[1]


def make_subdomain_problem(
    mesh: Mesh,
    ncomp: int,
    K_modes: list[sp.csr_matrix],
    f: np.ndarray,
    C: sp.csr_matrix,
) -> SubdomainProblem:
    n = ncomp * mesh.n_nodes
    return SubdomainProblem(
        mesh=mesh,
        ncomp=ncomp,
        K_modes=K_modes,
        f=f,
        C=C,
        R=rigid_body_modes(mesh, ncomp),
        floating=True,
        free_dofs=np.arange(n, dtype=np.intp),
        dirichlet_dofs=np.empty(0, dtype=np.intp),
    )


def apply_dirichlet(problem: SubdomainProblem, nodes: np.ndarray) -> SubdomainProblem:
    """Eliminate the dofs of the tagged nodes from every operator.

    Homogeneous data only: rows and columns are removed outright. Interface
    dofs must stay free, so eliminating one is an error.
    """
    nodes = np.unique(np.asarray(nodes, dtype=np.intp))
    if problem.ncomp == 1:
        drop = nodes
    else:
        drop = np.concatenate([2 * nodes, 2 * nodes + 1])
    drop = np.unique(drop)
    n = problem.n_dofs
    if drop.size and (drop.min() < 0 or drop.max() >= n):
        raise ValueError("Dirichlet node outside mesh")
    interface_rows = np.unique(problem.C.tocoo().row)
    clash = np.intersect1d(drop, interface_rows)
    if clash.size:
        raise ValueError(
            f"cannot eliminate interface dofs {clash.tolist()}; interface must stay free"
        )
    keep = np.setdiff1d(np.arange(n, dtype=np.intp), drop)
    if keep.size == 0:
        raise ValueError("Dirichlet elimination would remove every dof")
    K_modes = [K[keep][:, keep].tocsr() for K in problem.K_modes]
    C = problem.C[keep].tocsr()
    return SubdomainProblem(
        mesh=problem.mesh,
        ncomp=problem.ncomp,
        K_modes=K_modes,
        f=problem.f[keep],
        C=C,
        R=np.zeros((keep.size, 0)),
        floating=False,
        free_dofs=problem.free_dofs[keep],
        dirichlet_dofs=np.concatenate([problem.dirichlet_dofs, drop]),
    )


def interface_nodes(mesh1: Mesh, mesh2: Mesh) -> tuple[np.ndarray, np.ndarray]:
    """Matching node ids (same physical point) between the two meshes.

    Matching is exact on coordinates; the lattice construction guarantees
    shared points agree bitwise. Nodes expected on the geometric overlap of
    the two rectangles must all match, otherwise the meshes are non-conforming.
    """
    lookup = {(x, y): i for i, (x, y) in enumerate(map(tuple, mesh2.nodes))}
    ids1, ids2 = [], []
    for i, (x, y) in enumerate(map(tuple, mesh1.nodes)):
        j = lookup.get((x, y))
        if j is not None:
            ids1.append(i)
            ids2.append(j)

    # validate conformity on the rectangle overlap
    x0 = max(mesh1.rect[0], mesh2.rect[0])
    x1 = min(mesh1.rect[1], mesh2.rect[1])
    y0 = max(mesh1.rect[2], mesh2.rect[2])
    y1 = min(mesh1.rect[3], mesh2.rect[3])
    tol = 1e-12 * max(1.0, abs(x1), abs(y1))
    for mesh, matched in ((mesh1, ids1), (mesh2, ids2)):
        on_overlap = np.where(
            (mesh.nodes[:, 0] >= x0 - tol)
            & (mesh.nodes[:, 0] <= x1 + tol)
            & (mesh.nodes[:, 1] >= y0 - tol)
            & (mesh.nodes[:, 1] <= y1 + tol)
        )[0]
        if not set(on_overlap.tolist()) <= set(matched):
            raise ValueError("unmatched interface node: meshes are non-conforming")
    return np.asarray(ids1, dtype=np.intp), np.asarray(ids2, dtype=np.intp)


def build_interface_extractors(
    mesh1: Mesh,
    mesh2: Mesh,
    ncomp: int = 1,
    exclude_nodes1: np.ndarray | None = None,
    exclude_nodes2: np.ndarray | None = None,
) -> tuple[sp.csr_matrix, sp.csr_matrix, np.ndarray]:
    """Boolean extractors C_1, C_2 with a shared interface-column ordering.

    Columns are ordered by the interface node coordinates (lexicographic in
    (x, y)), components fastest. Nodes in the exclusion sets (Dirichlet nodes
    sitting on the interface closure) are dropped from the interface.
    Returns (C_1, C_2, interface coordinates per column-node).
    """
    ids1, ids2 = interface_nodes(mesh1, mesh2)
    if exclude_nodes1 is not None and len(exclude_nodes1):
        m = ~np.isin(ids1, np.asarray(exclude_nodes1, dtype=np.intp))
        ids1, ids2 = ids1[m], ids2[m]
    if exclude_nodes2 is not None and len(exclude_nodes2):
        m = ~np.isin(ids2, np.asarray(exclude_nodes2, dtype=np.intp))
        ids1, ids2 = ids1[m], ids2[m]
    if ids1.size == 0:
        raise ValueError("meshes share no interface nodes")
    coords = mesh1.nodes[ids1]
    order = np.lexsort((coords[:, 1], coords[:, 0]))
    ids1, ids2, coords = ids1[order], ids2[order], coords[order]

    def extractor(mesh: Mesh, ids: np.ndarray) -> sp.csr_matrix:
        n = ncomp * mesh.n_nodes
        m_i = ncomp * ids.size
        rows = (
            ids
            if ncomp == 1
            else np.stack([2 * ids, 2 * ids + 1], axis=1).ravel()
        )
        cols = np.arange(m_i)
        data = np.ones(m_i)
        return sp.csr_matrix((data, (rows, cols)), shape=(n, m_i))

    return extractor(mesh1, ids1), extractor(mesh2, ids2), coords


def export_mesh(mesh: Mesh) -> str:
    """Plain-text mesh dump: nodes, triangles, then edge tags."""
    lines = [f"# nodes {mesh.n_nodes}"]
    lines += [f"{x!r} {y!r}" for x, y in mesh.nodes]
    lines.append(f"# triangles {mesh.triangles.shape[0]}")
    lines += [f"{a} {b} {c}" for a, b, c in mesh.triangles]
    for tag in sorted(mesh.edge_tags):
        edges = mesh.edge_tags[tag]
        lines.append(f"# tag {tag} {len(edges)}")
        lines += [f"{a} {b}" for a, b in edges]
    return "\n".join(lines) + "\n"
