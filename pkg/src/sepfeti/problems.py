"""Turn-key two-sub-domain model problems.

Two benchmark families are provided, each driven by a JSON-compatible
configuration dictionary:

* ``lshape`` — scalar diffusion on an L-shaped union of two rectangles with a
  shifted-lognormal diffusivity per sub-domain (independent Gaussian germs).
* ``beam`` — plane-strain cantilever split into two boxes with an affine
  Young's modulus per sub-domain (independent uniform germs); the outboard
  half is unconstrained and therefore floating.

``*-desk`` profiles are coarsened instances used by the acceptance suite.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from typing import Any

import numpy as np
import scipy.sparse as sp

from . import fem2d, pc_basis, random_field
from .fem2d import Mesh, SubdomainProblem
from .pc_basis import MultiIndexSet, build_index_set
from .random_field import AFFINE_UNIFORM, LOGNORMAL_SHIFTED, RandomFieldPC


class ConfigError(ValueError):
    """Raised for malformed or unknown configuration entries."""


KIND_DIFFUSION = "diffusion"
KIND_ELASTICITY = "elasticity"

_SOLVER_DEFAULTS: dict[str, Any] = {
    "eps": 1e-2,
    "rank_max": 10,
    "sweep_tol": 1e-6,
    "max_sweeps": 50,
    "n_mc_residual": 10000,
    "seed": 12345,
    "pcpg_tol": 1e-8,
    "preconditioner": "stiffness",
    "det_update": "auto",
}

_LSHAPE_DEFAULT: dict[str, Any] = {
    "geometry": {
        "rects": [[[0.0, 2.0], [0.0, 1.0]], [[1.0, 2.0], [1.0, 3.0]]],
        "split": None,
    },
    "mesh": {"h1": 0.05, "h2": 0.05},
    "field": {
        "kind": LOGNORMAL_SHIFTED,
        "d1": 4,
        "d2": 6,
        "sigma1": 0.5,
        "sigma2": 0.5,
        "lc1": 2.0 / 3.0,
        "lc2": 1.0 / 3.0,
        "mean": 1.0,
        "shift": 0.28,
        "nu": None,
    },
    "pc": {"p1": 3, "p2": 3},
    "stats": {"probe_point": [1.0, 0.5]},
    "solver": dict(_SOLVER_DEFAULTS),
}

_BEAM_DEFAULT: dict[str, Any] = {
    "geometry": {"rects": [[[0.0, 5.0], [0.0, 1.0]]], "split": 2.5},
    "mesh": {"h1": 0.1, "h2": 0.1},
    "field": {
        "kind": AFFINE_UNIFORM,
        "d1": 9,
        "d2": 11,
        "sigma1": 35.0,
        "sigma2": 35.0,
        "lc1": 2.0 / 3.0,
        "lc2": 1.0 / 3.0,
        "mean": 100.0,
        "shift": 0.0,
        "nu": 0.3,
    },
    "pc": {"p1": 3, "p2": 3},
    "stats": {"probe_point": [5.0, 0.0]},
    "solver": dict(_SOLVER_DEFAULTS),
}

_PROFILES: dict[str, dict[str, Any]] = {
    "lshape": {},
    "lshape-desk": {
        "mesh": {"h1": 0.25, "h2": 0.25},
        "field": {"d1": 2, "d2": 2},
        "pc": {"p1": 2, "p2": 2},
    },
    "beam": {},
    "beam-desk": {
        "geometry": {"rects": [[[0.0, 4.0], [0.0, 1.0]]], "split": 2.0},
        "mesh": {"h1": 0.2, "h2": 0.2},
        "field": {"d1": 2, "d2": 2},
        "pc": {"p1": 2, "p2": 2},
        "stats": {"probe_point": [4.0, 0.0]},
    },
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in out:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a table")
            out[key] = _merge(out[key], value, where)
        else:
            out[key] = value
    return out


def profile_config(name: str) -> dict[str, Any]:
    """Fully-resolved config for a named profile."""
    if name not in _PROFILES:
        raise ConfigError(
            f"unknown profile {name!r}; choose from {sorted(_PROFILES)}"
        )
    base = _LSHAPE_DEFAULT if name.startswith("lshape") else _BEAM_DEFAULT
    return _merge(base, _PROFILES[name])


def _validate(config: dict[str, Any]) -> None:
    geo, mesh, fld, pc = (
        config["geometry"],
        config["mesh"],
        config["field"],
        config["pc"],
    )
    rects = geo["rects"]
    if len(rects) not in (1, 2):
        raise ConfigError("geometry.rects must list one or two rectangles")
    if len(rects) == 1 and geo["split"] is None:
        raise ConfigError("geometry.split required with a single rectangle")
    for h_key in ("h1", "h2"):
        if not mesh[h_key] > 0:
            raise ConfigError(f"mesh.{h_key} must be positive")
    if fld["kind"] not in (LOGNORMAL_SHIFTED, AFFINE_UNIFORM):
        raise ConfigError(f"unknown field.kind {fld['kind']!r}")
    for key in ("d1", "d2"):
        if int(fld[key]) < 1:
            raise ConfigError(f"field.{key} must be >= 1")
    for key in ("sigma1", "sigma2"):
        if fld[key] < 0:
            raise ConfigError(f"field.{key} must be >= 0")
    for key in ("lc1", "lc2"):
        if not fld[key] > 0:
            raise ConfigError(f"field.{key} must be positive")
    if fld["kind"] == AFFINE_UNIFORM:
        nu = fld["nu"]
        if nu is None or not 0.0 < nu < 0.5:
            raise ConfigError("field.nu must lie in (0, 0.5)")
    for key in ("p1", "p2"):
        if int(pc[key]) < 1:
            raise ConfigError(f"pc.{key} must be >= 1")


def _two_rects(config: dict[str, Any]) -> list[tuple[tuple, tuple]]:
    rects = config["geometry"]["rects"]
    if len(rects) == 2:
        return [
            ((r[0][0], r[0][1]), (r[1][0], r[1][1])) for r in rects
        ]
    (x0, x1), (y0, y1) = rects[0]
    split = config["geometry"]["split"]
    if not x0 < split < x1:
        raise ConfigError("geometry.split must fall inside the rectangle")
    return [((x0, split), (y0, y1)), ((split, x1), (y0, y1))]


@dataclass(frozen=True)
class CoupledProblem:
    """Two coupled sub-domain problems plus their stochastic metadata.

    ``sub`` holds the reduced (post-Dirichlet) problems used by the solvers;
    ``sub_full`` keeps the unreduced assembly for monolithic merging and
    reaction recovery. Factors of the separated representation for germ i
    live in the span of ``idx_solution[i]``.
    """

    kind: str
    ncomp: int
    sub: tuple[SubdomainProblem, SubdomainProblem]
    sub_full: tuple[SubdomainProblem, SubdomainProblem]
    dirichlet_nodes: tuple[np.ndarray, np.ndarray]
    fields: tuple[RandomFieldPC, RandomFieldPC]
    idx_solution: tuple[MultiIndexSet, MultiIndexSet]
    interface_coords: np.ndarray
    config: dict[str, Any]

    @property
    def d_total(self) -> int:
        return self.fields[0].n_dims + self.fields[1].n_dims

    @property
    def family_kind(self) -> str:
        return self.fields[0].family_kind

    def config_json(self) -> str:
        return json.dumps(self.config, sort_keys=True)


def _build_field(
    mesh: Mesh, config: dict[str, Any], side: int
) -> RandomFieldPC:
    fld = config["field"]
    kernel = random_field.GaussianKernel(
        sigma=float(fld[f"sigma{side}"]),
        corr_len=float(fld[f"lc{side}"]),
        domain=f"D{side}",
    )
    kl = random_field.discretize_kl(kernel, mesh, int(fld[f"d{side}"]))
    p = int(config["pc"][f"p{side}"])
    if fld["kind"] == LOGNORMAL_SHIFTED:
        return random_field.lognormal_pc_coefficients(
            kl, mean_log=float(fld["mean"]), shift=float(fld["shift"]), order=2 * p
        )
    return random_field.affine_uniform_field(kl, mean=float(fld["mean"]))


def _assemble_modes(
    mesh: Mesh, pc_field: RandomFieldPC, kind: str, nu: float | None
) -> list[sp.csr_matrix]:
    """One stiffness mode per field coefficient; the constant shift is folded
    into the mean (index-0) mode since psi_0 = 1."""
    modes = []
    for j, coeff in enumerate(pc_field.coeff_fields):
        values = coeff + pc_field.shift if j == 0 else coeff
        if kind == KIND_DIFFUSION:
            modes.append(fem2d.assemble_diffusion_mode(mesh, values))
        else:
            modes.append(fem2d.assemble_elasticity_mode(mesh, values, nu))
    return modes


def _dirichlet_coord_exclusions(
    meshes: list[Mesh], dirichlet: list[np.ndarray]
) -> list[np.ndarray]:
    """Interface nodes must be dropped if their location is constrained in
    either sub-domain (shared corner nodes)."""
    taken = set()
    for mesh, nodes in zip(meshes, dirichlet):
        for n in nodes:
            taken.add((float(mesh.nodes[n, 0]), float(mesh.nodes[n, 1])))
    out = []
    for mesh in meshes:
        ids = [
            n
            for n in range(mesh.n_nodes)
            if (float(mesh.nodes[n, 0]), float(mesh.nodes[n, 1])) in taken
        ]
        out.append(np.array(ids, dtype=np.intp))
    return out


def _finish(
    kind: str,
    ncomp: int,
    meshes: list[Mesh],
    fields: list[RandomFieldPC],
    loads: list[np.ndarray],
    dirichlet: list[np.ndarray],
    config: dict[str, Any],
) -> CoupledProblem:
    nu = config["field"]["nu"]
    excl = _dirichlet_coord_exclusions(meshes, dirichlet)
    C1, C2, coords = fem2d.build_interface_extractors(
        meshes[0], meshes[1], ncomp=ncomp, exclude_nodes1=excl[0], exclude_nodes2=excl[1]
    )
    full = []
    reduced = []
    for mesh, pc_field, f, C, dn in zip(meshes, fields, loads, (C1, C2), dirichlet):
        modes = _assemble_modes(mesh, pc_field, kind, nu)
        prob = fem2d.make_subdomain_problem(mesh, ncomp, modes, f, C)
        full.append(prob)
        reduced.append(fem2d.apply_dirichlet(prob, dn) if dn.size else prob)
    idx = (
        build_index_set(fields[0].n_dims, int(config["pc"]["p1"])),
        build_index_set(fields[1].n_dims, int(config["pc"]["p2"])),
    )
    return CoupledProblem(
        kind=kind,
        ncomp=ncomp,
        sub=(reduced[0], reduced[1]),
        sub_full=(full[0], full[1]),
        dirichlet_nodes=(dirichlet[0], dirichlet[1]),
        fields=(fields[0], fields[1]),
        idx_solution=idx,
        interface_coords=coords,
        config=copy.deepcopy(config),
    )


def build_example_I(config: dict[str, Any] | None = None) -> CoupledProblem:
    """L-shaped diffusion: unit body load on the first box, homogeneous
    Dirichlet walls on the far edges, lognormal diffusivity."""
    cfg = _merge(_LSHAPE_DEFAULT, config or {})
    if cfg["field"]["kind"] != LOGNORMAL_SHIFTED:
        raise ConfigError("diffusion example requires field.kind lognormal-shifted")
    _validate(cfg)
    rects = _two_rects(cfg)
    h = (float(cfg["mesh"]["h1"]), float(cfg["mesh"]["h2"]))
    meshes = [fem2d.build_rect_mesh(*rects[i], h[i]) for i in range(2)]
    fields = [_build_field(meshes[i], cfg, i + 1) for i in range(2)]
    loads = [
        fem2d.assemble_load(meshes[0], body=10.0),
        np.zeros(meshes[1].n_nodes),
    ]
    dirichlet = [m.nodes_on_side("right") for m in meshes]
    return _finish(KIND_DIFFUSION, 1, meshes, fields, loads, dirichlet, cfg)


def build_example_II(config: dict[str, Any] | None = None) -> CoupledProblem:
    """Cantilever in plane strain: clamped at the left wall, downward
    traction on the whole top edge, affine-uniform Young's modulus; the
    outboard sub-domain floats."""
    cfg = _merge(_BEAM_DEFAULT, config or {})
    if cfg["field"]["kind"] != AFFINE_UNIFORM:
        raise ConfigError("beam example requires field.kind affine-uniform")
    _validate(cfg)
    rects = _two_rects(cfg)
    h = (float(cfg["mesh"]["h1"]), float(cfg["mesh"]["h2"]))
    meshes = [fem2d.build_rect_mesh(*rects[i], h[i]) for i in range(2)]
    fields = [_build_field(meshes[i], cfg, i + 1) for i in range(2)]
    loads = [
        fem2d.assemble_load(
            m,
            traction=(0.0, -0.1),
            traction_edges=m.side_edge_list("top"),
            ncomp=2,
        )
        for m in meshes
    ]
    dirichlet = [meshes[0].nodes_on_side("left"), np.array([], dtype=np.intp)]
    return _finish(KIND_ELASTICITY, 2, meshes, fields, loads, dirichlet, cfg)


def build_from_config(config: dict[str, Any]) -> CoupledProblem:
    """Dispatch on field.kind; configs must be fully resolved or partial
    overlays of the matching example."""
    kind = (config.get("field") or {}).get("kind", LOGNORMAL_SHIFTED)
    if kind == AFFINE_UNIFORM:
        return build_example_II(config)
    return build_example_I(config)


def swap_subdomains(problem: CoupledProblem) -> CoupledProblem:
    """Exchange the two sub-domain roles.

    The interface constraint orientation flips, so any multiplier of the
    swapped problem is the negative of the original's.
    """
    cfg = copy.deepcopy(problem.config)
    for group, pairs in (
        ("mesh", [("h1", "h2")]),
        ("field", [("d1", "d2"), ("sigma1", "sigma2"), ("lc1", "lc2")]),
        ("pc", [("p1", "p2")]),
    ):
        for a, b in pairs:
            cfg[group][a], cfg[group][b] = cfg[group][b], cfg[group][a]
    if len(cfg["geometry"]["rects"]) == 2:
        cfg["geometry"]["rects"] = cfg["geometry"]["rects"][::-1]
    return CoupledProblem(
        kind=problem.kind,
        ncomp=problem.ncomp,
        sub=problem.sub[::-1],
        sub_full=problem.sub_full[::-1],
        dirichlet_nodes=problem.dirichlet_nodes[::-1],
        fields=problem.fields[::-1],
        idx_solution=problem.idx_solution[::-1],
        interface_coords=problem.interface_coords,
        config=cfg,
    )


@dataclass(frozen=True)
class MonolithicProblem:
    """Single-domain view of a coupled problem on the merged mesh.

    ``field_indices`` are multi-indices over the combined germ (d1 + d2
    entries); ``K_modes`` align with its rows. ``restrict1``/``restrict2``
    map a sub-domain's free dofs into the monolithic free-dof vector.
    """

    nodes: np.ndarray
    ncomp: int
    family_kind: str
    d1: int
    d2: int
    field_indices: np.ndarray
    K_modes: list[sp.csr_matrix]
    f: np.ndarray
    free_glob: np.ndarray
    restrict1: np.ndarray
    restrict2: np.ndarray
    node_maps: tuple[np.ndarray, np.ndarray]

    @property
    def n_free(self) -> int:
        return self.free_glob.size

    def node_at(self, xy: tuple[float, float], tol: float = 1e-9) -> int:
        hit = np.where(
            (np.abs(self.nodes[:, 0] - xy[0]) < tol)
            & (np.abs(self.nodes[:, 1] - xy[1]) < tol)
        )[0]
        if hit.size != 1:
            raise ValueError(f"no unique merged node at {xy}")
        return int(hit[0])

    def free_index(self, node: int, comp: int = 0) -> int:
        """Position of a node's dof in the free (eliminated) dof vector."""
        dof = node * self.ncomp + comp
        pos = int(np.searchsorted(self.free_glob, dof))
        if pos >= self.free_glob.size or self.free_glob[pos] != dof:
            raise ValueError(f"dof (node {node}, component {comp}) is constrained")
        return pos


def _dof_expand(nodes: np.ndarray, ncomp: int) -> np.ndarray:
    if ncomp == 1:
        return nodes
    return np.stack([2 * nodes, 2 * nodes + 1], axis=1).ravel()


def as_monolithic(problem: CoupledProblem) -> MonolithicProblem:
    """Merge the two sub-domains into one conforming problem.

    Stiffness modes of each sub-domain are scattered into merged numbering
    and tagged with their multi-index embedded into the combined germ
    (the other germ's block padded with zeros); the two mean modes combine.
    """
    m1, m2 = problem.sub_full[0].mesh, problem.sub_full[1].mesh
    ncomp = problem.ncomp
    ids1, ids2 = fem2d.interface_nodes(m1, m2)
    n1, n2 = m1.n_nodes, m2.n_nodes
    local2glob1 = np.arange(n1, dtype=np.intp)
    local2glob2 = np.full(n2, -1, dtype=np.intp)
    local2glob2[ids2] = ids1
    fresh = np.where(local2glob2 < 0)[0]
    local2glob2[fresh] = n1 + np.arange(fresh.size)
    n_nodes = n1 + fresh.size
    nodes = np.vstack([m1.nodes, m2.nodes[fresh]])

    dmap1 = _dof_expand(local2glob1, ncomp)
    dmap2 = _dof_expand(local2glob2, ncomp)
    n_dofs = ncomp * n_nodes

    def scatter(K: sp.spmatrix, dmap: np.ndarray) -> sp.csr_matrix:
        K = K.tocoo()
        return sp.csr_matrix(
            (K.data, (dmap[K.row], dmap[K.col])), shape=(n_dofs, n_dofs)
        )

    d1, d2 = problem.fields[0].n_dims, problem.fields[1].n_dims
    idx1 = problem.fields[0].idx_set.indices
    idx2 = problem.fields[1].idx_set.indices
    rows = [np.zeros(d1 + d2, dtype=idx1.dtype)]
    modes = [
        scatter(problem.sub_full[0].K_modes[0], dmap1)
        + scatter(problem.sub_full[1].K_modes[0], dmap2)
    ]
    for j in range(1, idx1.shape[0]):
        rows.append(np.concatenate([idx1[j], np.zeros(d2, dtype=idx1.dtype)]))
        modes.append(scatter(problem.sub_full[0].K_modes[j], dmap1))
    for j in range(1, idx2.shape[0]):
        rows.append(np.concatenate([np.zeros(d1, dtype=idx2.dtype), idx2[j]]))
        modes.append(scatter(problem.sub_full[1].K_modes[j], dmap2))
    field_indices = np.vstack(rows)

    f = np.zeros(n_dofs)
    np.add.at(f, dmap1, problem.sub_full[0].f)
    np.add.at(f, dmap2, problem.sub_full[1].f)

    fixed = np.unique(
        np.concatenate(
            [
                _dof_expand(np.asarray(problem.dirichlet_nodes[0], dtype=np.intp), ncomp)
                if problem.dirichlet_nodes[0].size
                else np.array([], dtype=np.intp),
                dmap2[
                    _dof_expand(
                        np.asarray(problem.dirichlet_nodes[1], dtype=np.intp), ncomp
                    )
                ]
                if problem.dirichlet_nodes[1].size
                else np.array([], dtype=np.intp),
            ]
        )
    )
    free_glob = np.setdiff1d(np.arange(n_dofs), fixed)
    K_red = [K[free_glob][:, free_glob].tocsr() for K in modes]
    f_red = f[free_glob]

    def restriction(sub: SubdomainProblem, dmap: np.ndarray) -> np.ndarray:
        glob = dmap[sub.free_dofs]
        pos = np.searchsorted(free_glob, glob)
        if not (free_glob[pos] == glob).all():
            raise AssertionError("sub-domain free dof missing from merged system")
        return pos

    return MonolithicProblem(
        nodes=nodes,
        ncomp=ncomp,
        family_kind=problem.family_kind,
        d1=d1,
        d2=d2,
        field_indices=field_indices,
        K_modes=K_red,
        f=f_red,
        free_glob=free_glob,
        restrict1=restriction(problem.sub[0], dmap1),
        restrict2=restriction(problem.sub[1], dmap2),
        node_maps=(local2glob1, local2glob2),
    )
