"""Brute-force reference solvers for validating the separated representation.

Two independent routes to the same limiting object: a Galerkin solve in the
combined basis over all germ dimensions (exact projection, small instances
only) and plain Monte Carlo with one sparse deterministic solve per sample
(any instance, statistical error reported). Agreement of the two — and of the
low-rank solver against either — is the main correctness argument.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .feti import SolverError, _pcg
from .pc_basis import (
    LEGENDRE,
    MultiIndexSet,
    build_index_set,
    eval_multivariate_batch,
    family,
    triple_moment_matrix,
    univariate_triple_tensor,
)
from .problems import ConfigError, CoupledProblem, as_monolithic

__all__ = [
    "CoupledSGSolution",
    "MCAccumulator",
    "MonolithicSGSolution",
    "monte_carlo_reference",
    "solve_coupled_sg",
    "solve_monolithic_sg",
]

_SG_SIZE_GUARD = 200_000


@dataclass(frozen=True)
class MonolithicSGSolution:
    """Galerkin coefficients over the merged dofs in the combined basis.

    Row a of ``coeffs`` is the coefficient vector of combined basis term a;
    row 0 is the solution mean (orthonormal basis).
    """

    idx_set: MultiIndexSet
    coeffs: np.ndarray

    def mean(self) -> np.ndarray:
        return self.coeffs[0]

    def second_moment(self) -> np.ndarray:
        return np.einsum("am,am->m", self.coeffs, self.coeffs)

    def std(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.second_moment() - self.mean() ** 2, 0.0))

    def to_json(self) -> str:
        payload = {
            "d": self.idx_set.d,
            "p": self.idx_set.p,
            "n_dofs": self.coeffs.shape[1],
            "coeffs": self.coeffs.ravel().tolist(),
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MonolithicSGSolution":
        blob = json.loads(text)
        idx = build_index_set(int(blob["d"]), int(blob["p"]))
        coeffs = np.asarray(blob["coeffs"], float).reshape(len(idx), int(blob["n_dofs"]))
        return cls(idx_set=idx, coeffs=coeffs)


@dataclass(frozen=True)
class CoupledSGSolution:
    """Combined-basis coefficients of the two-field saddle formulation."""

    idx_set: MultiIndexSet
    u1: np.ndarray
    u2: np.ndarray
    lam: np.ndarray


def _combined_weights(
    fam, field_rows: np.ndarray, idx_set: MultiIndexSet
) -> np.ndarray:
    """Stack of G_j[a, b] = E[psi_j psi_a psi_b] over combined multi-indices."""
    field_p = int(field_rows.sum(axis=1).max(initial=0))
    tensor = univariate_triple_tensor(fam, field_p, idx_set.p, idx_set.p)
    return np.stack(
        [triple_moment_matrix(tensor, row, idx_set) for row in field_rows]
    )


def _sg_solve_core(
    K_modes, G: np.ndarray, f: np.ndarray, tol: float = 1e-10
) -> np.ndarray:
    """CG solve of sum_j G_j (x) K_j u = e0 (x) f with a mean-mode block
    preconditioner; returns the (P, M) coefficient block."""
    P = G.shape[1]
    lu = spla.splu(K_modes[0].tocsc())

    def apply_A(U: np.ndarray) -> np.ndarray:
        out = np.zeros_like(U)
        for j, K in enumerate(K_modes):
            out += G[j] @ (K @ U.T).T
        return out

    def apply_M(R: np.ndarray) -> np.ndarray:
        return lu.solve(R.T).T

    B = np.zeros((P, f.shape[0]))
    B[0] = f
    return _pcg(
        apply_A, B, apply_M, tol, max_iter=50 * P + 200, what="combined-basis solve"
    )


def _guard(n_unknowns: int, n_dofs: int, n_terms: int) -> None:
    if n_unknowns > _SG_SIZE_GUARD:
        raise ConfigError(
            f"combined-basis system size M*P = {n_unknowns} ({n_dofs} dofs x "
            f"{n_terms} basis terms) exceeds the oracle guard {_SG_SIZE_GUARD}"
        )


def solve_monolithic_sg(
    problem: CoupledProblem, p: int | None = None
) -> MonolithicSGSolution:
    """Galerkin projection of the merged single-domain problem.

    The basis is total-degree ``p`` (default: the larger per-germ solution
    order) over all d1 + d2 germ dimensions. Solved by preconditioned CG to
    1e-10; guarded against instances too large for a direct oracle.
    """
    mono = as_monolithic(problem)
    if p is None:
        p = max(problem.idx_solution[0].p, problem.idx_solution[1].p)
    idx = build_index_set(mono.d1 + mono.d2, p)
    _guard(mono.n_free * len(idx), mono.n_free, len(idx))
    fam = family(mono.family_kind)
    G = _combined_weights(fam, mono.field_indices, idx)
    coeffs = _sg_solve_core(mono.K_modes, G, mono.f)
    return MonolithicSGSolution(idx_set=idx, coeffs=coeffs)


def solve_coupled_sg(
    problem: CoupledProblem, p: int | None = None
) -> CoupledSGSolution:
    """Galerkin projection of the two-field saddle formulation.

    Solves for the coefficients of both sub-domain solutions and the
    interface multiplier in the combined basis; the identity Gram makes the
    coupling blocks I (x) C_i. Sparse direct solve with a finiteness check.
    """
    s1, s2 = problem.sub
    if p is None:
        p = max(problem.idx_solution[0].p, problem.idx_solution[1].p)
    d = problem.fields[0].n_dims + problem.fields[1].n_dims
    idx = build_index_set(d, p)
    P = len(idx)
    n_unknowns = P * (s1.n_dofs + s2.n_dofs + s1.n_interface)
    _guard(n_unknowns, s1.n_dofs + s2.n_dofs + s1.n_interface, P)
    fam = family(problem.family_kind)
    d1 = problem.fields[0].n_dims
    rows1 = np.pad(problem.fields[0].idx_set.indices, ((0, 0), (0, d - d1)))
    rows2 = np.pad(problem.fields[1].idx_set.indices, ((0, 0), (d1, 0)))
    G1 = _combined_weights(fam, rows1, idx)
    G2 = _combined_weights(fam, rows2, idx)
    A11 = sum(sp.kron(sp.csr_matrix(G1[j]), K) for j, K in enumerate(s1.K_modes))
    A22 = sum(sp.kron(sp.csr_matrix(G2[j]), K) for j, K in enumerate(s2.K_modes))
    B1 = sp.kron(sp.identity(P, format="csr"), s1.C)
    B2 = sp.kron(sp.identity(P, format="csr"), s2.C)
    A = sp.bmat(
        [[A11, None, -B1], [None, A22, B2], [-B1.T, B2.T, None]], format="csc"
    )
    rhs = np.zeros(n_unknowns)
    rhs[: s1.n_dofs] = s1.f
    rhs[P * s1.n_dofs : P * s1.n_dofs + s2.n_dofs] = s2.f
    x = spla.spsolve(A, rhs)
    if not np.all(np.isfinite(x)):
        raise SolverError("combined-basis saddle solve broke down (singular system)")
    n1 = P * s1.n_dofs
    n2 = P * s2.n_dofs
    return CoupledSGSolution(
        idx_set=idx,
        u1=x[:n1].reshape(P, s1.n_dofs),
        u2=x[n1 : n1 + n2].reshape(P, s2.n_dofs),
        lam=x[n1 + n2 :].reshape(P, s1.n_interface),
    )


@dataclass
class MCAccumulator:
    """Running Monte-Carlo statistics of the merged nodal solution.

    Mean and squared deviations accumulate in the update form that avoids
    cancellation, so identical samples give exactly zero variance; merges use
    the pairwise combination rule and are associative.
    """

    n_samples: int
    mean: np.ndarray
    m2: np.ndarray
    seed: object
    probe_dofs: tuple[int, ...] = ()
    probe_samples: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    @property
    def second_moment(self) -> np.ndarray:
        return self.m2 / self.n_samples + self.mean**2

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.m2, 0.0) / self.n_samples)

    @property
    def std_error_mean(self) -> np.ndarray:
        return self.std / math.sqrt(self.n_samples)

    def merge(self, other: "MCAccumulator") -> "MCAccumulator":
        if self.probe_dofs != other.probe_dofs:
            raise ValueError("cannot merge accumulators with different probes")
        na, nb = self.n_samples, other.n_samples
        delta = other.mean - self.mean
        return MCAccumulator(
            n_samples=na + nb,
            mean=self.mean + delta * (nb / (na + nb)),
            m2=self.m2 + other.m2 + delta**2 * (na * nb / (na + nb)),
            seed=(self.seed, other.seed),
            probe_dofs=self.probe_dofs,
            probe_samples=np.vstack([self.probe_samples, other.probe_samples])
            if self.probe_dofs
            else self.probe_samples,
        )


def _aligned_mode_data(K_modes) -> tuple[sp.csc_matrix, np.ndarray]:
    """Union sparsity pattern and per-mode data rows scattered onto it."""

    def keys_of(A: sp.csc_matrix) -> np.ndarray:
        cols = np.repeat(np.arange(A.shape[1]), np.diff(A.indptr))
        return cols.astype(np.int64) * A.shape[0] + A.indices

    cleaned = []
    for K in K_modes:
        A = K.tocsc(copy=True)
        A.eliminate_zeros()
        A.sort_indices()
        cleaned.append(A)
    pattern = sum(abs(A) for A in cleaned).tocsc()
    pattern.sort_indices()
    pattern_keys = keys_of(pattern)
    rows = np.zeros((len(cleaned), pattern.nnz))
    for j, A in enumerate(cleaned):
        keys = keys_of(A)
        pos = np.searchsorted(pattern_keys, keys)
        if (pos >= pattern_keys.size).any() or not np.array_equal(
            pattern_keys[pos], keys
        ):
            raise AssertionError("stiffness mode pattern escaped the union pattern")
        rows[j, pos] = A.data
    return pattern, rows


def monte_carlo_reference(
    problem: CoupledProblem,
    n_samples: int,
    seed: int = 0,
    probe_dofs: tuple[int, ...] = (),
) -> MCAccumulator:
    """Per-sample deterministic solves of the merged problem.

    Each seeded germ sample weights the precomputed stiffness modes on a
    shared sparsity pattern (no re-assembly), and the resulting sparse system
    is factored and solved. Mean and second moment accumulate over samples;
    values at ``probe_dofs`` (free-dof indices) are stored for density
    estimation.
    """
    if n_samples < 1:
        raise ValueError("need at least one sample")
    mono = as_monolithic(problem)
    d = mono.d1 + mono.d2
    fidx = MultiIndexSet(
        d=d,
        p=int(mono.field_indices.sum(axis=1).max(initial=0)),
        indices=mono.field_indices,
    )
    fam = family(mono.family_kind)
    rng = np.random.default_rng(seed)
    if mono.family_kind == LEGENDRE:
        xi = rng.uniform(-1.0, 1.0, (n_samples, d))
    else:
        xi = rng.standard_normal((n_samples, d))
    Psi = eval_multivariate_batch(fam, fidx, xi)
    pattern, mode_data = _aligned_mode_data(mono.K_modes)
    data = Psi @ mode_data
    mean = np.zeros(mono.n_free)
    m2 = np.zeros(mono.n_free)
    probes = np.empty((n_samples, len(probe_dofs)))
    probe_idx = np.asarray(probe_dofs, dtype=int)
    for n in range(n_samples):
        A = sp.csc_matrix(
            (data[n], pattern.indices, pattern.indptr), shape=pattern.shape
        )
        try:
            lu = spla.splu(A)
        except RuntimeError as exc:
            raise SolverError(
                f"sample system is singular at germ value {xi[n]}: {exc}"
            ) from exc
        u = lu.solve(mono.f)
        delta = u - mean
        mean += delta / (n + 1)
        m2 += delta * (u - mean)
        if probe_idx.size:
            probes[n] = u[probe_idx]
    return MCAccumulator(
        n_samples=n_samples,
        mean=mean,
        m2=m2,
        seed=seed,
        probe_dofs=tuple(int(i) for i in probe_dofs),
        probe_samples=probes,
    )
