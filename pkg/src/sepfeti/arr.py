"""Alternating rank-update solver for the separated two-domain representation.

The solution of the coupled stochastic problem is sought as a low-rank sum

    u_i(x, xi) ~ sum_l  u_i[l] * phi1[l](xi_1) * phi2[l](xi_2),   i = 1, 2,

with the interface multiplier sharing the same stochastic factors. Each outer
sweep alternates three linear sub-problems: a deterministic update of the
spatial factors and the multiplier (a block saddle system handled by the
interface iteration or a direct solve), then one Galerkin update per germ for
the stochastic factors. The rank grows one factor pair at a time until a
Monte-Carlo estimate of the sub-domain equilibrium residual meets the target.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .feti import (
    SolverError,
    build_block_operators,
    build_interface_problem,
    direct_saddle_solve,
    galerkin_mode_matrices,
    pcpg_solve,
    recover_primal,
)
from .pc_basis import LEGENDRE, eval_multivariate_batch, family
from .problems import CoupledProblem

__all__ = [
    "ArrTrace",
    "RankRecord",
    "ResidualEstimate",
    "SeparatedSolution",
    "SweepRecord",
    "arr_run",
    "deterministic_update",
    "energy",
    "evaluate_separated",
    "interface_violation",
    "normalize_factors",
    "residual_norm",
    "stochastic_update_phi1",
    "stochastic_update_phi2",
]


@dataclass
class SeparatedSolution:
    """Rank-r factor set for both sub-domain solutions and the multiplier.

    Rows of ``u1``/``u2``/``lam`` are deterministic factors; rows of ``phi1``
    and ``phi2`` hold PC coefficients of the stochastic factors on the germ
    of the respective sub-domain. All five arrays share the leading rank axis.
    """

    u1: np.ndarray
    u2: np.ndarray
    lam: np.ndarray
    phi1: np.ndarray
    phi2: np.ndarray

    def __post_init__(self) -> None:
        for name in ("u1", "u2", "lam", "phi1", "phi2"):
            setattr(self, name, np.atleast_2d(np.asarray(getattr(self, name), float)))
        ranks = {arr.shape[0] for arr in (self.u1, self.u2, self.lam, self.phi1, self.phi2)}
        if len(ranks) != 1:
            raise ValueError(f"factor counts disagree: {sorted(ranks)}")

    @property
    def rank(self) -> int:
        return self.u1.shape[0]

    @classmethod
    def zeros(cls, problem: CoupledProblem, rank: int) -> "SeparatedSolution":
        s1, s2 = problem.sub
        return cls(
            u1=np.zeros((rank, s1.n_dofs)),
            u2=np.zeros((rank, s2.n_dofs)),
            lam=np.zeros((rank, s1.n_interface)),
            phi1=np.zeros((rank, len(problem.idx_solution[0]))),
            phi2=np.zeros((rank, len(problem.idx_solution[1]))),
        )

    def copy(self) -> "SeparatedSolution":
        return SeparatedSolution(
            u1=self.u1.copy(), u2=self.u2.copy(), lam=self.lam.copy(),
            phi1=self.phi1.copy(), phi2=self.phi2.copy(),
        )

    def to_json(self) -> str:
        payload = {
            "rank": self.rank,
            "m1": self.u1.shape[1],
            "m2": self.u2.shape[1],
            "m_interface": self.lam.shape[1],
            "p1_terms": self.phi1.shape[1],
            "p2_terms": self.phi2.shape[1],
            "u1": self.u1.ravel().tolist(),
            "u2": self.u2.ravel().tolist(),
            "lam": self.lam.ravel().tolist(),
            "phi1": self.phi1.ravel().tolist(),
            "phi2": self.phi2.ravel().tolist(),
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SeparatedSolution":
        blob = json.loads(text)
        r = int(blob["rank"])

        def grab(key: str, width_key: str) -> np.ndarray:
            return np.asarray(blob[key], float).reshape(r, int(blob[width_key]))

        return cls(
            u1=grab("u1", "m1"),
            u2=grab("u2", "m2"),
            lam=grab("lam", "m_interface"),
            phi1=grab("phi1", "p1_terms"),
            phi2=grab("phi2", "p2_terms"),
        )


@dataclass
class SweepRecord:
    """Energy bookkeeping for one sweep, including the mixed-factor values
    needed to check the saddle-iteration improvement guarantees."""

    rank: int
    sweep: int
    pi_before: float
    pi_u_new_lam_old: float
    pi_u_old_lam_new: float
    pi_det: float
    pi_phi1: float
    pi_after: float
    pcpg_iters: int
    interface_gap: float
    eps_res: float | None = None


@dataclass
class RankRecord:
    rank: int
    eps_res: float
    eps_res_se: float
    n_sweeps: int


@dataclass
class ArrTrace:
    sweeps: list[SweepRecord] = field(default_factory=list)
    ranks: list[RankRecord] = field(default_factory=list)
    converged: bool = False

    def to_csv(self) -> str:
        lines = ["sweep,r,pi,eps_res,pcpg_iters"]
        for k, s in enumerate(self.sweeps, start=1):
            eps = "" if s.eps_res is None else repr(s.eps_res)
            lines.append(f"{k},{s.rank},{s.pi_after!r},{eps},{s.pcpg_iters}")
        return "\n".join(lines) + "\n"


def energy(
    problem: CoupledProblem,
    solution: SeparatedSolution,
    *,
    ops=None,
    g_modes: tuple[np.ndarray, np.ndarray] | None = None,
) -> float:
    """Value of the coupled variational functional at the separated factors.

    pi = sum_i E[ 1/2 u_i^T K_i u_i - u_i^T f_i ] + E[ lam^T (C2^T u2 - C1^T u1) ],
    with every expectation factorized into per-germ moment products, so the
    evaluation is exact for the polynomial factor representation.
    """
    if ops is None:
        if g_modes is None:
            g_modes = galerkin_mode_matrices(problem)
        ops = build_block_operators(problem, solution.phi1, solution.phi2, g_modes)
    U1, U2, lam = solution.u1, solution.u2, solution.lam
    quad = 0.0
    for j, K in enumerate(ops.K1_modes):
        quad += float(np.sum(ops.H1[j] * (U1 @ (K @ U1.T))))
    for j, K in enumerate(ops.K2_modes):
        quad += float(np.sum(ops.H2[j] * (U2 @ (K @ U2.T))))
    loads = float(ops.fw @ (U1 @ ops.f1)) + float(ops.fw @ (U2 @ ops.f2))
    gap = (ops.C2.T @ U2.T).T - (ops.C1.T @ U1.T).T
    coupling = float(np.sum(ops.W * (lam @ gap.T)))
    return 0.5 * quad - loads + coupling


def interface_violation(problem: CoupledProblem, solution: SeparatedSolution) -> float:
    """Diagnostic E[ |C1^T u1 - C2^T u2|^2 ] of the separated representation.

    The stochastic factor updates treat the interface constraint as already
    satisfied per factor (which the preceding deterministic update enforces);
    this reports how much a subsequent factor change re-opened the gap.
    """
    W = (solution.phi1 @ solution.phi1.T) * (solution.phi2 @ solution.phi2.T)
    C1, C2 = problem.sub[0].C, problem.sub[1].C
    V = (C2.T @ solution.u2.T).T - (C1.T @ solution.u1.T).T
    return float(np.sum(W * (V @ V.T)))


_AUTO_DIRECT_LIMIT = 3000


def deterministic_update(
    problem: CoupledProblem,
    solution: SeparatedSolution,
    *,
    method: str = "auto",
    pcpg_eps: float = 1e-8,
    preconditioner: str = "stiffness",
    g_modes: tuple[np.ndarray, np.ndarray] | None = None,
    ops=None,
    info: dict | None = None,
) -> SeparatedSolution:
    """Solve the block saddle system for the spatial factors and multiplier.

    The stochastic factors stay frozen; only their expectation weights enter.
    ``method`` is "direct" (sparse factorization of the full saddle system),
    "pcpg" (interface iteration with primal back-substitution), or "auto"
    (direct below a size threshold). ``info``, when given, receives the
    interface iteration count, the rigid-body amplitudes and the method used.
    """
    if ops is None:
        if g_modes is None:
            g_modes = galerkin_mode_matrices(problem)
        ops = build_block_operators(problem, solution.phi1, solution.phi2, g_modes)
    if method == "auto":
        size = solution.rank * (ops.M1 + ops.M2 + ops.M_I)
        method = "direct" if size <= _AUTO_DIRECT_LIMIT else "pcpg"
    if method == "direct":
        u1, u2, lam, alpha = direct_saddle_solve(ops)
        iters = 0
    elif method == "pcpg":
        ip = build_interface_problem(ops, preconditioner=preconditioner)
        lam, trace = pcpg_solve(ip, eps=pcpg_eps)
        u1, u2, alpha = recover_primal(ip, lam)
        iters = trace.n_iters
    else:
        raise ValueError(f"unknown deterministic update method {method!r}")
    if info is not None:
        info.update(pcpg_iters=iters, alpha=alpha, method=method)
    return SeparatedSolution(
        u1=u1, u2=u2, lam=lam, phi1=solution.phi1.copy(), phi2=solution.phi2.copy()
    )


def _factor_update(
    K_own: list,
    U_own: np.ndarray,
    G_own: np.ndarray,
    f_own: np.ndarray,
    K_other: list,
    U_other: np.ndarray,
    G_other: np.ndarray,
    phi_other: np.ndarray,
    f_other: np.ndarray,
) -> np.ndarray:
    """Galerkin update of one germ's stochastic factors (all else frozen).

    Minimizing the functional over the r factor vectors of one germ yields a
    symmetric positive-definite system of size r*P. The multiplier term is
    absent: the preceding deterministic update enforces interface continuity
    per factor (the coupling weights are nonsingular), and that property does
    not involve the factors being updated, so the coupling contribution
    vanishes identically in the unknowns.
    """
    r = U_own.shape[0]
    P = G_own.shape[1]
    Q_own = np.stack([U_own @ (K @ U_own.T) for K in K_own])
    Q_other = np.stack([U_other @ (K @ U_other.T) for K in K_other])
    T_other = np.einsum("la,jab,mb->jlm", phi_other, G_other, phi_other)
    gram_other = phi_other @ phi_other.T
    S = np.einsum("jlm,jlm->lm", Q_other, T_other)
    A = np.einsum("jlm,jab->lamb", Q_own * gram_other[None, :, :], G_own)
    diag = np.arange(P)
    A[:, diag, :, diag] += S
    A = A.reshape(r * P, r * P)
    b = np.zeros((r, P))
    b[:, 0] = (U_own @ f_own + U_other @ f_other) * phi_other[:, 0]
    try:
        x = sla.cho_solve(sla.cho_factor(A), b.ravel())
    except sla.LinAlgError:
        raise SolverError(
            "stochastic factor system is singular (degenerate deterministic "
            "factors); re-initialize the factors with a different seed"
        ) from None
    return x.reshape(r, P)


def stochastic_update_phi1(
    problem: CoupledProblem,
    solution: SeparatedSolution,
    g_modes: tuple[np.ndarray, np.ndarray] | None = None,
) -> np.ndarray:
    """Updated first-germ factor coefficients minimizing the functional."""
    if g_modes is None:
        g_modes = galerkin_mode_matrices(problem)
    s1, s2 = problem.sub
    return _factor_update(
        s1.K_modes, solution.u1, g_modes[0], s1.f,
        s2.K_modes, solution.u2, g_modes[1], solution.phi2, s2.f,
    )


def stochastic_update_phi2(
    problem: CoupledProblem,
    solution: SeparatedSolution,
    g_modes: tuple[np.ndarray, np.ndarray] | None = None,
) -> np.ndarray:
    """Updated second-germ factor coefficients minimizing the functional."""
    if g_modes is None:
        g_modes = galerkin_mode_matrices(problem)
    s1, s2 = problem.sub
    return _factor_update(
        s2.K_modes, solution.u2, g_modes[1], s2.f,
        s1.K_modes, solution.u1, g_modes[0], solution.phi1, s1.f,
    )


def normalize_factors(solution: SeparatedSolution) -> SeparatedSolution:
    """Rescale each stochastic factor pair to unit second moment.

    With orthonormal PC bases the second moment of a factor equals its
    coefficient-vector 2-norm squared. The removed scales fold into the
    deterministic and multiplier factors, so the represented random vectors
    are unchanged. Near-unit norms are snapped to one, making the operation
    idempotent.
    """
    n1 = np.linalg.norm(solution.phi1, axis=1)
    n2 = np.linalg.norm(solution.phi2, axis=1)
    if (n1 < 1e-150).any() or (n2 < 1e-150).any():
        raise SolverError("degenerate factor: zero-norm stochastic coefficients")
    snap = 64 * np.finfo(float).eps
    n1 = np.where(np.abs(n1 - 1.0) <= snap, 1.0, n1)
    n2 = np.where(np.abs(n2 - 1.0) <= snap, 1.0, n2)
    s = n1 * n2
    return SeparatedSolution(
        u1=solution.u1 * s[:, None],
        u2=solution.u2 * s[:, None],
        lam=solution.lam * s[:, None],
        phi1=solution.phi1 / n1[:, None],
        phi2=solution.phi2 / n2[:, None],
    )


def evaluate_separated(
    problem: CoupledProblem,
    solution: SeparatedSolution,
    xi1: np.ndarray,
    xi2: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Realizations (u1, u2, lam) at paired germ samples; each row one sample."""
    fam = family(problem.family_kind)
    a1 = eval_multivariate_batch(fam, problem.idx_solution[0], np.atleast_2d(xi1))
    a2 = eval_multivariate_batch(fam, problem.idx_solution[1], np.atleast_2d(xi2))
    c = (a1 @ solution.phi1.T) * (a2 @ solution.phi2.T)
    return c @ solution.u1, c @ solution.u2, c @ solution.lam


@dataclass(frozen=True)
class ResidualEstimate:
    """Monte-Carlo estimate of the worst relative sub-domain residual."""

    value: float
    std_error: float
    n_samples: int
    per_domain: dict[int, tuple[float, float]]


def _sample_germs(problem: CoupledProblem, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    out = []
    for fld in problem.fields:
        if problem.family_kind == LEGENDRE:
            out.append(rng.uniform(-1.0, 1.0, (n, fld.n_dims)))
        else:
            out.append(rng.standard_normal((n, fld.n_dims)))
    return out[0], out[1]


def residual_norm(
    problem: CoupledProblem,
    solution: SeparatedSolution,
    n_samples: int = 10_000,
    seed=0,
    batch_size: int = 512,
) -> ResidualEstimate:
    """Relative equilibrium residual of the separated factors, by Monte Carlo.

    For each loaded sub-domain the residual R_i(xi) = f_i +/- C_i lam(xi)
    - K_i(xi_i) u_i(xi) (sign per the saddle convention: the first sub-domain
    receives the interface reaction with a plus) is evaluated sample-wise
    through the stiffness modes, without assembling K_i(xi_i). Reported is
    eps = max_i sqrt(E[|R_i|^2]) / |f_i| together with its MC standard error.
    Zero-load sub-domains are excluded: their relative residual is undefined.
    """
    loaded = [i for i, s in enumerate(problem.sub) if np.linalg.norm(s.f) > 0.0]
    if not loaded:
        raise ValueError(
            "every sub-domain has zero load; the relative residual is undefined"
        )
    n = int(n_samples)
    rng = np.random.default_rng(seed)
    fam = family(problem.family_kind)
    xi = _sample_germs(problem, n, rng)
    a1 = eval_multivariate_batch(fam, problem.idx_solution[0], xi[0])
    a2 = eval_multivariate_batch(fam, problem.idx_solution[1], xi[1])
    c = (a1 @ solution.phi1.T) * (a2 @ solution.phi2.T)
    lam_vals = c @ solution.lam
    signs = {0: 1.0, 1: -1.0}
    factors = (solution.u1, solution.u2)
    per: dict[int, tuple[float, float]] = {}
    for i in loaded:
        sub = problem.sub[i]
        fnorm = float(np.linalg.norm(sub.f))
        U = factors[i]
        KU = np.stack([np.asarray((K @ U.T).T) for K in sub.K_modes])
        J, r, M = KU.shape
        KU = KU.reshape(J * r, M)
        Psi = eval_multivariate_batch(fam, problem.fields[i].idx_set, xi[i])
        react = signs[i] * (sub.C @ lam_vals.T).T
        sq = np.empty(n)
        for start in range(0, n, batch_size):
            stop = min(start + batch_size, n)
            Z = (Psi[start:stop, :, None] * c[start:stop, None, :]).reshape(
                stop - start, J * r
            )
            R = sub.f[None, :] + react[start:stop] - Z @ KU
            sq[start:stop] = np.einsum("nm,nm->n", R, R)
        m = float(sq.mean())
        if m == 0.0:
            per[i] = (0.0, 0.0)
            continue
        se_m = float(sq.std(ddof=1)) / math.sqrt(n)
        per[i] = (math.sqrt(m) / fnorm, se_m / (2.0 * math.sqrt(m) * fnorm))
    worst = max(per, key=lambda i: per[i][0])
    return ResidualEstimate(
        value=per[worst][0],
        std_error=per[worst][1],
        n_samples=n,
        per_domain=per,
    )


def _append_random_factor(problem: CoupledProblem, solution: SeparatedSolution, rng):
    """Warm start for the next rank: keep all factors, add one random pair."""
    s1, s2 = problem.sub
    phi1 = rng.standard_normal(len(problem.idx_solution[0]))
    phi2 = rng.standard_normal(len(problem.idx_solution[1]))
    phi1 /= np.linalg.norm(phi1)
    phi2 /= np.linalg.norm(phi2)
    return SeparatedSolution(
        u1=np.vstack([solution.u1, np.zeros((1, s1.n_dofs))]),
        u2=np.vstack([solution.u2, np.zeros((1, s2.n_dofs))]),
        lam=np.vstack([solution.lam, np.zeros((1, s1.n_interface))]),
        phi1=np.vstack([solution.phi1, phi1]),
        phi2=np.vstack([solution.phi2, phi2]),
    )


def arr_run(
    problem: CoupledProblem,
    eps: float | None = None,
    *,
    tol_rank: float | None = None,
    r_max: int | None = None,
    max_sweeps: int | None = None,
    seed: int | None = None,
    n_mc_residual: int | None = None,
    det_method: str | None = None,
    pcpg_eps: float | None = None,
    preconditioner: str | None = None,
) -> tuple[SeparatedSolution, ArrTrace]:
    """Run the alternating rank-update algorithm to a residual target.

    Starting from rank one with seeded random unit-normalized stochastic
    factors, each sweep performs the deterministic update followed by the two
    stochastic factor updates and a normalization pass. Sweeps repeat until
    the relative energy change drops below ``tol_rank`` (or the sweep cap);
    the rank then grows by one warm-started random pair until the Monte-Carlo
    residual estimate meets ``eps`` or ``r_max`` is reached. Parameters left
    as None fall back to the problem's solver configuration.
    """
    cfg = dict(problem.config.get("solver", {}))

    def pick(value, key, fallback):
        return value if value is not None else cfg.get(key, fallback)

    eps = float(pick(eps, "eps", 1e-2))
    tol_rank = float(pick(tol_rank, "sweep_tol", 1e-6))
    r_max = int(pick(r_max, "rank_max", 10))
    max_sweeps = int(pick(max_sweeps, "max_sweeps", 50))
    seed = int(pick(seed, "seed", 12345))
    n_mc_residual = int(pick(n_mc_residual, "n_mc_residual", 10_000))
    det_method = pick(det_method, "det_update", "auto")
    pcpg_eps = float(pick(pcpg_eps, "pcpg_tol", 1e-8))
    preconditioner = pick(preconditioner, "preconditioner", "stiffness")
    if eps <= 0.0:
        raise ValueError("the residual target must be positive")

    g_modes = galerkin_mode_matrices(problem)
    rng = np.random.default_rng([seed, 0xA11])
    sol = SeparatedSolution.zeros(problem, rank=0)
    trace = ArrTrace()
    for r in range(1, r_max + 1):
        sol = _append_random_factor(problem, sol, rng)
        pi_prev = None
        n_sweeps = 0
        for sweep in range(1, max_sweeps + 1):
            n_sweeps = sweep
            ops = build_block_operators(problem, sol.phi1, sol.phi2, g_modes)
            pi_before = energy(problem, sol, ops=ops)
            info: dict = {}
            upd = deterministic_update(
                problem,
                sol,
                method=det_method,
                pcpg_eps=pcpg_eps,
                preconditioner=preconditioner,
                ops=ops,
                info=info,
            )
            pi_u_new = energy(
                problem,
                SeparatedSolution(
                    u1=upd.u1, u2=upd.u2, lam=sol.lam, phi1=sol.phi1, phi2=sol.phi2
                ),
                ops=ops,
            )
            pi_lam_new = energy(
                problem,
                SeparatedSolution(
                    u1=sol.u1, u2=sol.u2, lam=upd.lam, phi1=sol.phi1, phi2=sol.phi2
                ),
                ops=ops,
            )
            sol = upd
            pi_det = energy(problem, sol, ops=ops)
            sol.phi1[:] = stochastic_update_phi1(problem, sol, g_modes)
            pi_phi1 = energy(problem, sol, g_modes=g_modes)
            sol.phi2[:] = stochastic_update_phi2(problem, sol, g_modes)
            sol = normalize_factors(sol)
            pi_after = energy(problem, sol, g_modes=g_modes)
            trace.sweeps.append(
                SweepRecord(
                    rank=r,
                    sweep=sweep,
                    pi_before=pi_before,
                    pi_u_new_lam_old=pi_u_new,
                    pi_u_old_lam_new=pi_lam_new,
                    pi_det=pi_det,
                    pi_phi1=pi_phi1,
                    pi_after=pi_after,
                    pcpg_iters=info["pcpg_iters"],
                    interface_gap=interface_violation(problem, sol),
                )
            )
            if pi_prev is not None and abs(pi_after - pi_prev) <= tol_rank * abs(
                pi_after
            ):
                break
            pi_prev = pi_after
        est = residual_norm(
            problem, sol, n_samples=n_mc_residual, seed=[seed, 1000 + r]
        )
        trace.sweeps[-1].eps_res = est.value
        trace.ranks.append(
            RankRecord(
                rank=r,
                eps_res=est.value,
                eps_res_se=est.std_error,
                n_sweeps=n_sweeps,
            )
        )
        if est.value <= eps:
            trace.converged = True
            break
    return sol, trace
