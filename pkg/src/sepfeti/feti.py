"""Block FETI solver for the coupled deterministic update.

For a fixed set of stochastic factors, the deterministic factors of both
sub-domains and the interface multiplier satisfy one saddle system whose
blocks are expectation-weighted sums of the sub-domain stiffness modes:

    Khat_i(l, l') = sum_j H_i[j, l, l'] K_{i,j},   Chat_i = W (x) C_i.

Blocks are never assembled; every operator is applied matrix-free from the
small weight matrices and the shared sparse modes. The interface problem

    [ F_I      -R2I ] [lambda]   [ d]
    [ -R2I^T     0  ] [alpha ] = [-e]

with F_I = Chat_1^T Khat_1^{-1} Chat_1 + Chat_2^T Khat_2^+ Chat_2 is solved
by a projected preconditioned conjugate gradient iteration; the primal
factors follow by back-substitution

    u1 = Khat_1^{-1}(f1 + Chat_1 lambda),
    u2 = Khat_2^{+}(f2 - Chat_2 lambda) + R2hat alpha.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .pc_basis import family, triple_moment_matrix, univariate_triple_tensor
from .problems import CoupledProblem


class SolverError(RuntimeError):
    """Iterative solve failed to reach its tolerance."""


def galerkin_mode_matrices(problem: CoupledProblem) -> tuple[np.ndarray, np.ndarray]:
    """Per-germ stacks G[j][a,b] = E[psi_j psi_a psi_b].

    Row j runs over the coefficient-field multi-indices (degree up to twice
    the solution order, which the quadrature covers exactly); a, b run over
    the solution index set of the same germ.
    """
    fam = family(problem.family_kind)
    out = []
    for side in range(2):
        idx_sol = problem.idx_solution[side]
        idx_field = problem.fields[side].idx_set
        tensor = univariate_triple_tensor(fam, idx_field.p, idx_sol.p, idx_sol.p)
        G = np.stack(
            [
                triple_moment_matrix(tensor, row, idx_sol)
                for row in idx_field.indices
            ]
        )
        out.append(G)
    return out[0], out[1]


@dataclass
class BlockOperators:
    """Weight matrices plus shared sparse modes for the block saddle system.

    ``H1[j]``/``H2[j]`` are the (r, r) expectation weights of stiffness mode
    j; ``W`` weights the coupling blocks; ``fw`` weights the load. Dense
    block assembly is reserved for tiny direct solves and tests.
    """

    rank: int
    H1: np.ndarray
    H2: np.ndarray
    W: np.ndarray
    fw: np.ndarray
    K1_modes: list[sp.csr_matrix]
    K2_modes: list[sp.csr_matrix]
    C1: sp.csr_matrix
    C2: sp.csr_matrix
    f1: np.ndarray
    f2: np.ndarray
    R2: np.ndarray | None
    _jac1: list | None = field(default=None, repr=False)
    _jac2: list | None = field(default=None, repr=False)

    @property
    def M1(self) -> int:
        return self.f1.shape[0]

    @property
    def M2(self) -> int:
        return self.f2.shape[0]

    @property
    def M_I(self) -> int:
        return self.C1.shape[1]

    @property
    def floating(self) -> bool:
        return self.R2 is not None

    @property
    def fhat1(self) -> np.ndarray:
        return self.fw[:, None] * self.f1[None, :]

    @property
    def fhat2(self) -> np.ndarray:
        return self.fw[:, None] * self.f2[None, :]

    def apply_K1(self, U: np.ndarray) -> np.ndarray:
        out = np.zeros_like(U)
        for j, K in enumerate(self.K1_modes):
            out += (K @ (self.H1[j] @ U).T).T
        return out

    def apply_K2(self, U: np.ndarray) -> np.ndarray:
        out = np.zeros_like(U)
        for j, K in enumerate(self.K2_modes):
            out += (K @ (self.H2[j] @ U).T).T
        return out

    def apply_C1(self, lam: np.ndarray) -> np.ndarray:
        return (self.C1 @ (self.W @ lam).T).T

    def apply_C2(self, lam: np.ndarray) -> np.ndarray:
        return (self.C2 @ (self.W @ lam).T).T

    def apply_C1T(self, U: np.ndarray) -> np.ndarray:
        return (self.C1.T @ (self.W @ U).T).T

    def apply_C2T(self, U: np.ndarray) -> np.ndarray:
        return (self.C2.T @ (self.W @ U).T).T

    def project_null2(self, U: np.ndarray) -> np.ndarray:
        """Remove the rigid-body content of every second-block factor."""
        if self.R2 is None:
            return U
        return U - (U @ self.R2) @ self.R2.T

    def jacobi1(self) -> list:
        if self._jac1 is None:
            self._jac1 = [
                spla.splu(
                    sum(
                        self.H1[j][l, l] * K for j, K in enumerate(self.K1_modes)
                    ).tocsc()
                )
                for l in range(self.rank)
            ]
        return self._jac1

    def jacobi2(self) -> list:
        """Diagonal-block solvers; floating blocks are bordered by R2 so the
        factorization stays nonsingular and acts as the block pseudo-inverse."""
        if self._jac2 is None:
            self._jac2 = []
            for l in range(self.rank):
                D = sum(self.H2[j][l, l] * K for j, K in enumerate(self.K2_modes))
                if self.R2 is None:
                    self._jac2.append(("plain", spla.splu(D.tocsc())))
                else:
                    B = sp.bmat(
                        [[D, sp.csc_matrix(self.R2)], [sp.csc_matrix(self.R2).T, None]],
                        format="csc",
                    )
                    self._jac2.append(("bordered", spla.splu(B)))
        return self._jac2


def build_block_operators(
    problem: CoupledProblem,
    phi1: np.ndarray,
    phi2: np.ndarray,
    g_modes: tuple[np.ndarray, np.ndarray] | None = None,
) -> BlockOperators:
    """Assemble the expectation weights for the given stochastic factors.

    ``phi1``/``phi2`` hold one row of PC coefficients per rank. Weights:
    H1[j, l, l'] = E1[psi_j phi1^l phi1^l'] E2[phi2^l phi2^l'] (mirrored for
    side 2), W[l, l'] = E1[phi1^l phi1^l'] E2[phi2^l phi2^l'], and
    fw[l] = E1[phi1^l] E2[phi2^l]; all exact by orthonormality.
    """
    phi1 = np.atleast_2d(np.asarray(phi1, dtype=float))
    phi2 = np.atleast_2d(np.asarray(phi2, dtype=float))
    if phi1.shape[0] != phi2.shape[0]:
        raise ValueError("factor ranks differ between the two germs")
    if phi1.shape[1] != len(problem.idx_solution[0]) or phi2.shape[1] != len(
        problem.idx_solution[1]
    ):
        raise ValueError("factor coefficient length does not match the basis")
    if g_modes is None:
        g_modes = galerkin_mode_matrices(problem)
    G1, G2 = g_modes
    W1 = phi1 @ phi1.T
    W2 = phi2 @ phi2.T
    H1 = np.einsum("la,jab,mb->jlm", phi1, G1, phi1) * W2[None]
    H2 = np.einsum("la,jab,mb->jlm", phi2, G2, phi2) * W1[None]
    s2 = problem.sub[1]
    return BlockOperators(
        rank=phi1.shape[0],
        H1=H1,
        H2=H2,
        W=W1 * W2,
        fw=phi1[:, 0] * phi2[:, 0],
        K1_modes=problem.sub[0].K_modes,
        K2_modes=s2.K_modes,
        C1=problem.sub[0].C,
        C2=s2.C,
        f1=problem.sub[0].f,
        f2=s2.f,
        R2=s2.R if s2.floating else None,
    )


def _pcg(
    apply_A: Callable[[np.ndarray], np.ndarray],
    B: np.ndarray,
    apply_M: Callable[[np.ndarray], np.ndarray],
    tol: float,
    max_iter: int,
    project: Callable[[np.ndarray], np.ndarray] | None = None,
    what: str = "block solve",
) -> np.ndarray:
    """Preconditioned CG on block vectors, optionally inside a subspace."""
    bnorm = np.linalg.norm(B)
    if bnorm == 0.0:
        return np.zeros_like(B)
    X = np.zeros_like(B)
    R = B.copy()
    if project is not None:
        R = project(R)
    Z = apply_M(R)
    if project is not None:
        Z = project(Z)
    P = Z.copy()
    rz = float((R * Z).sum())
    for _ in range(max_iter):
        rel = np.linalg.norm(R) / bnorm
        if rel < tol:
            return X
        Q = apply_A(P)
        denom = float((P * Q).sum())
        if denom <= 0.0:
            raise SolverError(
                f"{what}: conjugate gradient broke down "
                f"(curvature {denom:.3e}, residual {rel:.3e})"
            )
        a = rz / denom
        X += a * P
        R -= a * Q
        if project is not None:
            R = project(R)
        Z = apply_M(R)
        if project is not None:
            Z = project(Z)
        rz_new = float((R * Z).sum())
        P = Z + (rz_new / rz) * P
        rz = rz_new
    rel = np.linalg.norm(R) / bnorm
    if rel < tol:
        return X
    raise SolverError(
        f"{what}: no convergence in {max_iter} iterations "
        f"(relative residual {rel:.3e}, target {tol:.1e})"
    )


def apply_K1_inverse(
    ops: BlockOperators, B: np.ndarray, tol: float = 1e-12, max_iter: int | None = None
) -> np.ndarray:
    """Solve Khat_1 X = B by CG with a block-Jacobi (diagonal-block) preconditioner."""
    solvers = ops.jacobi1()

    def precond(R: np.ndarray) -> np.ndarray:
        return np.stack([solvers[l].solve(R[l]) for l in range(ops.rank)])

    if max_iter is None:
        max_iter = 200 * ops.rank + 200
    return _pcg(ops.apply_K1, B, precond, tol, max_iter, what="first-block inverse")


def apply_K2_pseudoinverse(
    ops: BlockOperators,
    B: np.ndarray,
    tol: float = 1e-12,
    max_iter: int | None = None,
    check: bool = True,
) -> np.ndarray:
    """Particular solution of Khat_2 Y = B with no rigid-body content.

    ``check`` enforces the solvability condition R2hat^T B = 0; internal
    callers disable it and work with the range component of B (Moore-Penrose
    behaviour), which the interface iteration requires for its seed vectors.
    """
    if ops.floating:
        defect = np.linalg.norm(B @ ops.R2)
        if check and defect > 1e-8 * max(np.linalg.norm(B), 1e-300):
            raise SolverError(
                "right-hand side incompatible with the floating sub-domain: "
                f"|R2hat^T b| = {defect:.3e} violates the solvability condition"
            )
        B = ops.project_null2(B)
    solvers = ops.jacobi2()

    def precond(R: np.ndarray) -> np.ndarray:
        out = np.empty_like(R)
        for l in range(ops.rank):
            kind, lu = solvers[l]
            if kind == "plain":
                out[l] = lu.solve(R[l])
            else:
                out[l] = lu.solve(np.concatenate([R[l], np.zeros(ops.R2.shape[1])]))[
                    : ops.M2
                ]
        return out

    if max_iter is None:
        max_iter = 200 * ops.rank + 200
    project = ops.project_null2 if ops.floating else None
    return _pcg(
        ops.apply_K2, B, precond, tol, max_iter, project, "second-block pseudo-inverse"
    )


@dataclass
class NullSpaceBlocks:
    """Block-diagonal null space of the floating side and its interface image."""

    R2: np.ndarray  # (M2, n_rigid), orthonormal columns
    C2I: np.ndarray  # (M_I, n_rigid) = C2^T R2


@dataclass
class PcpgTrace:
    """Relative interface residual per iteration."""

    residuals: list[float]
    converged: bool

    @property
    def n_iters(self) -> int:
        return len(self.residuals)

    def to_csv(self) -> str:
        lines = ["iter,relative_residual"]
        lines += [f"{k},{r!r}" for k, r in enumerate(self.residuals, start=1)]
        return "\n".join(lines) + "\n"


@dataclass
class InterfaceProblem:
    """Implicit interface operator, projector, and preconditioner."""

    ops: BlockOperators
    null: NullSpaceBlocks | None
    precond: Callable[[np.ndarray], np.ndarray]
    cg_tol: float
    d: np.ndarray = field(init=False)
    e: np.ndarray | None = field(init=False)
    _SR: tuple | None = field(init=False, default=None, repr=False)

    def __post_init__(self):
        ops = self.ops
        if self.null is not None:
            SR = np.kron(ops.W @ ops.W, self.null.C2I.T @ self.null.C2I)
            try:
                self._SR = scipy.linalg.cho_factor(SR)
            except scipy.linalg.LinAlgError as err:
                raise SolverError(
                    "interface null-space columns are linearly dependent"
                ) from err
            self.e = ops.fhat2 @ self.null.R2
        else:
            self.e = None
        y2 = apply_K2_pseudoinverse(ops, ops.fhat2, tol=self.cg_tol, check=False)
        y1 = apply_K1_inverse(ops, ops.fhat1, tol=self.cg_tol)
        self.d = ops.apply_C2T(y2) - ops.apply_C1T(y1)

    def _solve_SR(self, A: np.ndarray) -> np.ndarray:
        return scipy.linalg.cho_solve(self._SR, A.ravel()).reshape(A.shape)

    def apply_F(self, lam: np.ndarray) -> np.ndarray:
        ops = self.ops
        y1 = apply_K1_inverse(ops, ops.apply_C1(lam), tol=self.cg_tol)
        y2 = apply_K2_pseudoinverse(ops, ops.apply_C2(lam), tol=self.cg_tol, check=False)
        return ops.apply_C1T(y1) + ops.apply_C2T(y2)

    def apply_P(self, lam: np.ndarray) -> np.ndarray:
        """Orthogonal projector onto the complement of range(R2I)."""
        if self.null is None:
            return lam
        A = self.ops.W @ lam @ self.null.C2I
        return lam - self.ops.W @ self._solve_SR(A) @ self.null.C2I.T

    def lambda_init(self) -> np.ndarray:
        """Feasible start R2I (R2I^T R2I)^{-1} e = the multiplier that makes
        the floating side's load compatible."""
        if self.null is None:
            return np.zeros((self.ops.rank, self.ops.M_I))
        return self.ops.W @ self._solve_SR(self.e) @ self.null.C2I.T

    def alpha_from(self, lam: np.ndarray) -> np.ndarray:
        """Rigid-body amplitudes (R2I^T R2I)^{-1} R2I^T (F lambda - d)."""
        if self.null is None:
            return np.zeros((self.ops.rank, 0))
        g = self.ops.W @ (self.apply_F(lam) - self.d) @ self.null.C2I
        return self._solve_SR(g)


def build_preconditioner(
    ops: BlockOperators, kind: str = "stiffness"
) -> Callable[[np.ndarray], np.ndarray]:
    """Interface preconditioner S^{-1}(C^T Khat C summed) S^{-1} or identity.

    S = Chat_1^T Chat_1 + Chat_2^T Chat_2 = 2 W^2 (x) I because the Boolean
    extractors satisfy C_i^T C_i = I (each interface dof is shared by exactly
    the two sub-domains).
    """
    if kind == "none":
        return lambda lam: lam
    if kind != "stiffness":
        raise ValueError(f"unknown preconditioner kind {kind!r}")
    Winv2 = 0.5 * scipy.linalg.pinvh(ops.W @ ops.W)
    A1 = np.einsum("ab,jbc,cd->jad", ops.W, ops.H1, ops.W)
    A2 = np.einsum("ab,jbc,cd->jad", ops.W, ops.H2, ops.W)
    KI1 = np.stack([(ops.C1.T @ K @ ops.C1).toarray() for K in ops.K1_modes])
    KI2 = np.stack([(ops.C2.T @ K @ ops.C2).toarray() for K in ops.K2_modes])

    def apply(lam: np.ndarray) -> np.ndarray:
        A = Winv2 @ lam
        B = np.einsum("jlk,km,jmn->ln", A1, A, KI1, optimize=True)
        B += np.einsum("jlk,km,jmn->ln", A2, A, KI2, optimize=True)
        return Winv2 @ B

    return apply


def build_interface_problem(
    ops: BlockOperators, preconditioner: str = "stiffness", cg_tol: float = 1e-12
) -> InterfaceProblem:
    null = (
        NullSpaceBlocks(R2=ops.R2, C2I=(ops.C2.T @ ops.R2)) if ops.floating else None
    )
    return InterfaceProblem(
        ops=ops,
        null=null,
        precond=build_preconditioner(ops, preconditioner),
        cg_tol=cg_tol,
    )


def pcpg_solve(
    ip: InterfaceProblem, eps: float = 1e-8, max_iters: int | None = None
) -> tuple[np.ndarray, PcpgTrace]:
    """Projected preconditioned conjugate gradients on the interface problem.

    Convergence criterion: |w_k| / |d| < eps with w the projected residual.
    Without a floating side this is plain preconditioned CG.
    """
    ops = ip.ops
    if max_iters is None:
        max_iters = 10 * ops.rank * ops.M_I
    lam = ip.lambda_init()
    dnorm = np.linalg.norm(ip.d)
    trace = PcpgTrace(residuals=[], converged=False)
    if dnorm == 0.0:
        trace.converged = True
        return lam, trace
    w = ip.apply_P(ip.d - ip.apply_F(lam))
    p = None
    num_old = 0.0
    rel = np.linalg.norm(w) / dnorm
    while rel >= eps:
        if len(trace.residuals) >= max_iters:
            raise SolverError(
                f"interface iteration exceeded {max_iters} iterations "
                f"(relative residual {rel:.3e}); trace: "
                + ",".join(f"{r:.3e}" for r in trace.residuals[-5:])
            )
        z = ip.precond(ip.apply_P(w))
        y = ip.apply_P(z)
        num = float((y * w).sum())
        p = y if p is None else y + (num / num_old) * p
        Fp = ip.apply_F(p)
        denom = float((p * Fp).sum())
        if denom <= 0.0:
            raise SolverError(
                f"interface operator lost positivity (curvature {denom:.3e})"
            )
        gamma = num / denom
        lam = lam + gamma * p
        w = w - gamma * ip.apply_P(Fp)
        num_old = num
        rel = np.linalg.norm(w) / dnorm
        trace.residuals.append(float(rel))
    trace.converged = True
    return lam, trace


def recover_primal(
    ip: InterfaceProblem, lam: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Back-substitute the converged multiplier into the primal factors."""
    ops = ip.ops
    u1 = apply_K1_inverse(ops, ops.fhat1 + ops.apply_C1(lam), tol=ip.cg_tol)
    u2 = apply_K2_pseudoinverse(
        ops, ops.fhat2 - ops.apply_C2(lam), tol=ip.cg_tol, check=False
    )
    alpha = ip.alpha_from(lam)
    if ops.floating:
        u2 = u2 + alpha @ ops.R2.T
    return u1, u2, alpha


_DIRECT_SIZE_CAP = 40_000


def direct_saddle_solve(
    ops: BlockOperators,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Assemble and factor the whole block saddle system (small cases only).

    The continuity rows pin the floating side's rigid modes, so the system is
    nonsingular without extra unknowns; alpha is read off as R2hat^T u2.
    """
    r = ops.rank
    n = r * (ops.M1 + ops.M2 + ops.M_I)
    if n > _DIRECT_SIZE_CAP:
        raise SolverError(
            f"direct saddle solve of size {n} exceeds the cap {_DIRECT_SIZE_CAP}; "
            "use the interface iteration"
        )
    K1 = sum(sp.kron(sp.csr_matrix(ops.H1[j]), K) for j, K in enumerate(ops.K1_modes))
    K2 = sum(sp.kron(sp.csr_matrix(ops.H2[j]), K) for j, K in enumerate(ops.K2_modes))
    C1 = sp.kron(sp.csr_matrix(ops.W), ops.C1)
    C2 = sp.kron(sp.csr_matrix(ops.W), ops.C2)
    A = sp.bmat(
        [[K1, None, -C1], [None, K2, C2], [-C1.T, C2.T, None]], format="csc"
    )
    b = np.concatenate([ops.fhat1.ravel(), ops.fhat2.ravel(), np.zeros(r * ops.M_I)])
    x = spla.spsolve(A, b)
    n1, n2 = r * ops.M1, r * ops.M2
    u1 = x[:n1].reshape(r, ops.M1)
    u2 = x[n1 : n1 + n2].reshape(r, ops.M2)
    lam = x[n1 + n2 :].reshape(r, ops.M_I)
    alpha = u2 @ ops.R2 if ops.floating else np.zeros((r, 0))
    return u1, u2, lam, alpha
