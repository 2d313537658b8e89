"""Random input models for the sub-domain solvers.

Gaussian-covariance fields are reduced by a Karhunen-Loeve (KL) expansion
discretized with the finite-element mass matrix, then expressed as polynomial
chaos coefficient fields: a shifted-lognormal diffusivity driven by Gaussian
germs and an affine Young's modulus driven by uniform germs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .fem2d import Mesh, mass_matrix
from .pc_basis import (
    HERMITE,
    LEGENDRE,
    MultiIndexSet,
    build_index_set,
    eval_multivariate_batch,
    family,
)

LOGNORMAL_SHIFTED = "lognormal-shifted"
AFFINE_UNIFORM = "affine-uniform"

_FAMILY_OF_KIND = {LOGNORMAL_SHIFTED: HERMITE, AFFINE_UNIFORM: LEGENDRE}


@dataclass(frozen=True)
class GaussianKernel:
    """Squared-exponential covariance sigma^2 exp(-|x-y|^2 / corr_len^2)."""

    sigma: float
    corr_len: float
    domain: str = ""

    def __post_init__(self):
        if self.sigma < 0.0:
            raise ValueError("sigma must be nonnegative")
        if self.corr_len <= 0.0:
            raise ValueError("corr_len must be positive")

    def matrix(self, points: np.ndarray) -> np.ndarray:
        """Kernel evaluated at all point pairs."""
        diff = points[:, None, :] - points[None, :, :]
        sq = (diff**2).sum(axis=2)
        return self.sigma**2 * np.exp(-sq / self.corr_len**2)


@dataclass(frozen=True)
class KLBasis:
    """Truncated KL expansion: eigenvalues and mass-orthonormal nodal modes."""

    eigenvalues: np.ndarray  # (d,) descending, >= 0
    modes: np.ndarray  # (d, n_nodes)
    mass: sp.spmatrix

    def __post_init__(self):
        self.eigenvalues.flags.writeable = False
        self.modes.flags.writeable = False

    @property
    def n_modes(self) -> int:
        return self.eigenvalues.size

    def pointwise_variance(self) -> np.ndarray:
        """Var of the truncated Gaussian germ field at each node."""
        return (self.eigenvalues[:, None] * self.modes**2).sum(axis=0)


def discretize_kl(kernel: GaussianKernel, mesh: Mesh, n_modes: int) -> KLBasis:
    """Solve the Galerkin eigenproblem (M C M) g = tau M g on mesh nodes.

    Returns the ``n_modes`` largest eigenpairs, eigenvalues descending and
    eigenvectors mass-orthonormal with the entry of largest magnitude
    positive.
    """
    n = mesh.n_nodes
    if not 0 <= n_modes <= n:
        raise ValueError(f"n_modes must lie in [0, {n}], got {n_modes}")
    M = mass_matrix(mesh).toarray()
    C = kernel.matrix(mesh.nodes)
    A = M @ C @ M
    A = 0.5 * (A + A.T)
    tau, vecs = scipy.linalg.eigh(A, M)
    tau = tau[::-1]
    vecs = vecs[:, ::-1]
    tol = 1e-12 * max(tau[0], 1.0) if tau.size else 0.0
    n_ok = int((tau >= -tol).sum())
    if n_modes > n_ok:
        raise ValueError(
            f"requested {n_modes} modes but only {n_ok} nonnegative eigenvalues"
        )
    tau = np.clip(tau[:n_modes], 0.0, None)
    modes = vecs[:, :n_modes].T.copy()
    if n_modes:
        biggest = np.abs(modes).argmax(axis=1)
        flip = modes[np.arange(n_modes), biggest] < 0.0
        modes[flip] *= -1.0
    return KLBasis(eigenvalues=tau, modes=modes, mass=mass_matrix(mesh))


def kl_to_json(kl: KLBasis) -> str:
    """Debug export: {"tau": [...], "modes": [[...], ...]}."""
    return json.dumps(
        {"tau": kl.eigenvalues.tolist(), "modes": kl.modes.tolist()},
        sort_keys=True,
    )


@dataclass(frozen=True)
class RandomFieldPC:
    """Polynomial-chaos coefficient fields kappa_i(x) plus a constant shift.

    The physical field is ``shift + sum_i coeff_fields[i] * psi_i(xi)`` with
    psi the orthonormal family implied by ``kind``.
    """

    kind: str
    idx_set: MultiIndexSet
    coeff_fields: np.ndarray  # (n_terms, n_nodes)
    shift: float = 0.0

    def __post_init__(self):
        if self.kind not in _FAMILY_OF_KIND:
            raise ValueError(f"unknown field kind {self.kind!r}")
        if self.coeff_fields.shape[0] != len(self.idx_set):
            raise ValueError("one coefficient field per multi-index required")
        self.coeff_fields.flags.writeable = False

    @property
    def family_kind(self) -> str:
        return _FAMILY_OF_KIND[self.kind]

    @property
    def n_dims(self) -> int:
        return self.idx_set.d


def lognormal_pc_coefficients(
    kl: KLBasis, mean_log: float, shift: float, order: int
) -> RandomFieldPC:
    """Hermite coefficients of shift + exp(G) with Gaussian germ G.

    G(x, xi) = mean_log + sum_j sqrt(tau_j) g_j(x) xi_j.  The coefficient on
    multi-index i is exp(mean_log + var[G](x)/2) / sqrt(i!) *
    prod_j (sqrt(tau_j) g_j(x))^{i_j}, kept for all |i|_1 <= order.
    """
    idx_set = build_index_set(kl.n_modes, order)
    sg = np.sqrt(kl.eigenvalues)[:, None] * kl.modes  # (d, n)
    mean_field = np.exp(mean_log + kl.pointwise_variance() / 2.0)
    idx = idx_set.indices
    # prod_j sg[j]^{i_j} for every multi-index, all nodes at once
    powers = np.prod(sg[None, :, :] ** idx[:, :, None], axis=1)
    inv_sqrt_fact = np.array(
        [1.0 / math.sqrt(math.prod(math.factorial(k) for k in row)) for row in idx]
    )
    coeff = mean_field[None, :] * powers * inv_sqrt_fact[:, None]
    return RandomFieldPC(
        kind=LOGNORMAL_SHIFTED, idx_set=idx_set, coeff_fields=coeff, shift=shift
    )


def affine_uniform_field(kl: KLBasis, mean: float) -> RandomFieldPC:
    """Order-one Legendre field mean + sum_j sqrt(tau_j) g_j(x) xi_j.

    With xi_j ~ U(-1,1) and orthonormal Legendre, E[xi psi_{e_j}] = 1/sqrt(3),
    so the unit-index coefficient is sqrt(tau_j) g_j / sqrt(3).
    """
    idx_set = build_index_set(kl.n_modes, 1)
    n = kl.modes.shape[1]
    coeff = np.zeros((len(idx_set), n))
    coeff[0] = mean
    sg = np.sqrt(kl.eigenvalues)[:, None] * kl.modes
    for row, index in enumerate(idx_set.indices):
        if index.sum() == 1:
            coeff[row] = sg[int(index.argmax())] / math.sqrt(3.0)
    return RandomFieldPC(
        kind=AFFINE_UNIFORM, idx_set=idx_set, coeff_fields=coeff, shift=0.0
    )


def sample_field_batch(pc_field: RandomFieldPC, xi: np.ndarray) -> np.ndarray:
    """Evaluate the field at many germ samples: xi (N, d) -> values (N, n)."""
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    if xi.shape[1] != pc_field.n_dims:
        raise ValueError(
            f"xi has {xi.shape[1]} entries, field expects {pc_field.n_dims}"
        )
    psi = eval_multivariate_batch(family(pc_field.family_kind), pc_field.idx_set, xi)
    return pc_field.shift + psi @ pc_field.coeff_fields


def sample_field(pc_field: RandomFieldPC, xi: np.ndarray) -> np.ndarray:
    """Nodal field values for a single germ vector xi of length d."""
    xi = np.asarray(xi, dtype=float)
    if xi.ndim != 1:
        raise ValueError("xi must be a vector; use sample_field_batch for batches")
    return sample_field_batch(pc_field, xi[None, :])[0]
