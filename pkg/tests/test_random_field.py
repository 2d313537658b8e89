"""Karhunen-Loeve discretization and polynomial-chaos coefficient fields."""

from __future__ import annotations

import json
import math

import numpy as np
import pytest

from sepfeti import fem2d, pc_basis, random_field


def unit_mesh(h=0.25):
    return fem2d.build_rect_mesh((0.0, 1.0), (0.0, 1.0), h)


def make_kl(sigma=0.5, corr_len=2.0 / 3.0, d=4, h=0.25, rect=None):
    rect = rect or ((0.0, 1.0), (0.0, 1.0))
    mesh = fem2d.build_rect_mesh(*rect, h)
    kernel = random_field.GaussianKernel(sigma=sigma, corr_len=corr_len)
    return random_field.discretize_kl(kernel, mesh, d), mesh


# ---------------------------------------------------------------------------
# KL discretization


def test_kernel_validation():
    with pytest.raises(ValueError):
        random_field.GaussianKernel(sigma=-1.0, corr_len=1.0)
    with pytest.raises(ValueError):
        random_field.GaussianKernel(sigma=1.0, corr_len=0.0)


def test_zero_variance_limit():
    kl, _ = make_kl(sigma=0.0, d=3, h=0.5)
    np.testing.assert_allclose(kl.eigenvalues, 0.0, atol=1e-14)


def test_eigenvalues_descending_nonnegative():
    kl, _ = make_kl(d=8)
    tau = kl.eigenvalues
    assert (tau >= 0).all()
    assert (np.diff(tau) <= 1e-14).all()


def test_mass_orthonormal_modes():
    kl, mesh = make_kl(sigma=0.7, corr_len=1.0 / 3.0, d=6)
    M = fem2d.mass_matrix(mesh)
    gram = kl.modes @ (M @ kl.modes.T)
    np.testing.assert_allclose(gram, np.eye(6), atol=1e-8)


def test_trace_identity():
    # sum of all eigenvalues approximates sigma^2 * area(D)
    mesh = unit_mesh(1.0 / 16.0)
    kl, _ = make_kl(sigma=0.5, corr_len=2.0 / 3.0, d=mesh.n_nodes, h=1.0 / 16.0)
    assert kl.eigenvalues.sum() == pytest.approx(0.25, rel=0.01)


def test_long_correlation_limit():
    # l -> infinity: rank-one kernel, tau_1 -> sigma^2 * area, g_1 -> const
    kl, _ = make_kl(sigma=0.8, corr_len=1e3, d=2, h=0.25)
    assert kl.eigenvalues[0] == pytest.approx(0.64, rel=1e-3)
    assert kl.eigenvalues[1] < 1e-4 * kl.eigenvalues[0]
    np.testing.assert_allclose(kl.modes[0], 1.0, atol=1e-3)


def test_mode_count_limit():
    mesh = unit_mesh(0.5)
    kernel = random_field.GaussianKernel(sigma=1.0, corr_len=1.0)
    with pytest.raises(ValueError):
        random_field.discretize_kl(kernel, mesh, mesh.n_nodes + 1)


def test_sign_convention_reproducible():
    kl1, _ = make_kl(d=5)
    kl2, _ = make_kl(d=5)
    np.testing.assert_array_equal(kl1.modes, kl2.modes)
    biggest = np.abs(kl1.modes).argmax(axis=1)
    assert (kl1.modes[np.arange(5), biggest] > 0).all()


def test_kl_json_export():
    kl, _ = make_kl(d=3, h=0.5)
    blob = json.loads(random_field.kl_to_json(kl))
    assert set(blob) == {"tau", "modes"}
    assert len(blob["tau"]) == 3
    assert len(blob["modes"]) == 3
    assert len(blob["modes"][0]) == kl.modes.shape[1]


# ---------------------------------------------------------------------------
# shifted-lognormal coefficients


def constant_unit_kl(h=0.5):
    """KL basis with a single flat mode on the unit square: tau=1, g=1."""
    mesh = unit_mesh(h)
    return (
        random_field.KLBasis(
            eigenvalues=np.array([1.0]),
            modes=np.ones((1, mesh.n_nodes)),
            mass=fem2d.mass_matrix(mesh),
        ),
        mesh,
    )


def test_lognormal_single_mode_analytic():
    # exp(xi) with xi ~ N(0,1): Hermite coefficients e^{1/2} / sqrt(i!)
    kl, _ = constant_unit_kl()
    pc = random_field.lognormal_pc_coefficients(kl, mean_log=0.0, shift=0.0, order=2)
    expected = [math.e**0.5, math.e**0.5, math.e**0.5 / math.sqrt(2.0)]
    assert pc.idx_set.indices.tolist() == [[0], [1], [2]]
    for row, value in zip(pc.coeff_fields, expected):
        np.testing.assert_allclose(row, value, rtol=1e-13)


def test_lognormal_coefficients_vs_mc():
    # Monte-Carlo oracle: kappa_i = E[exp(xi) psi_i(xi)]
    kl, _ = constant_unit_kl()
    pc = random_field.lognormal_pc_coefficients(kl, mean_log=0.0, shift=0.0, order=2)
    rng = np.random.default_rng(42)
    xi = rng.standard_normal(10**6)
    table = pc_basis.HERMITE_GAUSSIAN.eval_table(2, xi)
    kappa = np.exp(xi)
    for i in range(3):
        prod = kappa * table[i]
        est = prod.mean()
        se = prod.std() / math.sqrt(xi.size)
        assert abs(est - pc.coeff_fields[i, 0]) < 3 * se


def test_lognormal_mean_coefficient_pointwise():
    kl, _ = make_kl(sigma=0.5, corr_len=2.0 / 3.0, d=4)
    pc = random_field.lognormal_pc_coefficients(kl, mean_log=1.0, shift=0.28, order=6)
    var_g = (kl.eigenvalues[:, None] * kl.modes**2).sum(axis=0)
    np.testing.assert_allclose(pc.coeff_fields[0], np.exp(1.0 + var_g / 2.0), rtol=1e-12)
    assert pc.shift == 0.28
    assert pc.kind == "lognormal-shifted"


def test_lognormal_zero_field():
    kl, _ = make_kl(sigma=0.0, d=3, h=0.5)
    pc = random_field.lognormal_pc_coefficients(kl, mean_log=0.7, shift=0.0, order=4)
    np.testing.assert_allclose(pc.coeff_fields[0], math.exp(0.7), rtol=1e-13)
    assert np.abs(pc.coeff_fields[1:]).max() < 1e-14


def test_lognormal_reconstruction_statistics():
    # sampled moments of the truncated series match the analytic lognormal
    # moments within 3 standard errors plus the truncation remainder
    kl, mesh = make_kl(sigma=0.4, corr_len=2.0 / 3.0, d=2)
    order = 4
    pc = random_field.lognormal_pc_coefficients(kl, mean_log=0.2, shift=0.1, order=order)
    node = mesh.n_nodes // 2
    rng = np.random.default_rng(7)
    xi = rng.standard_normal((10**5, 2))
    vals = random_field.sample_field_batch(pc, xi)[:, node]

    v = float((kl.eigenvalues * kl.modes[:, node] ** 2).sum())
    mean_exact = 0.1 + math.exp(0.2 + v / 2.0)
    var_exact = (math.exp(v) - 1.0) * math.exp(2 * 0.2 + v)
    # variance captured by terms of total degree <= order
    var_trunc_gap = math.exp(2 * 0.2 + v) * (
        math.exp(v) - sum(v**k / math.factorial(k) for k in range(order + 1))
    )

    se_mean = vals.std() / math.sqrt(vals.size)
    assert abs(vals.mean() - mean_exact) < 3 * se_mean + 1e-12
    dev = (vals - vals.mean()) ** 2
    se_var = dev.std() / math.sqrt(vals.size)
    assert abs(vals.var() - var_exact) < 3 * se_var + var_trunc_gap


# ---------------------------------------------------------------------------
# affine-uniform coefficients


def test_affine_zero_sample_is_mean():
    kl, _ = make_kl(sigma=35.0, corr_len=2.0 / 3.0, d=5)
    pc = random_field.affine_uniform_field(kl, mean=100.0)
    vals = random_field.sample_field(pc, np.zeros(5))
    np.testing.assert_allclose(vals, 100.0, rtol=1e-13)
    assert pc.kind == "affine-uniform"
    assert pc.shift == 0.0


def test_affine_order_one_exact():
    kl, _ = make_kl(sigma=35.0, corr_len=2.0 / 3.0, d=4)
    pc = random_field.affine_uniform_field(kl, mean=100.0)
    rng = np.random.default_rng(11)
    xi = rng.uniform(-1.0, 1.0, 4)
    direct = 100.0 + (np.sqrt(kl.eigenvalues)[:, None] * kl.modes * xi[:, None]).sum(0)
    np.testing.assert_allclose(random_field.sample_field(pc, xi), direct, rtol=1e-12)
    ones = random_field.sample_field(pc, np.ones(4))
    direct1 = 100.0 + (np.sqrt(kl.eigenvalues)[:, None] * kl.modes).sum(0)
    np.testing.assert_allclose(ones, direct1, rtol=1e-12)


def test_affine_positive_for_beam_parameters():
    kl, _ = make_kl(
        sigma=35.0, corr_len=2.0 / 3.0, d=9, h=0.1, rect=((0.0, 2.5), (0.0, 1.0))
    )
    pc = random_field.affine_uniform_field(kl, mean=100.0)
    rng = np.random.default_rng(0)
    xi = rng.uniform(-1.0, 1.0, (10**4, 9))
    vals = random_field.sample_field_batch(pc, xi)
    assert vals.min() > 0.0


def test_affine_variance_vs_mc():
    kl, mesh = make_kl(sigma=2.0, corr_len=0.5, d=4)
    pc = random_field.affine_uniform_field(kl, mean=10.0)
    rng = np.random.default_rng(5)
    xi = rng.uniform(-1.0, 1.0, (2 * 10**5, 4))
    vals = random_field.sample_field_batch(pc, xi)
    var_formula = (kl.eigenvalues[:, None] * kl.modes**2).sum(0) / 3.0
    np.testing.assert_allclose(vals.var(axis=0), var_formula, rtol=0.02)


# ---------------------------------------------------------------------------
# sampling plumbing


def test_sample_dim_mismatch():
    kl, _ = make_kl(d=3, h=0.5)
    pc = random_field.affine_uniform_field(kl, mean=1.0)
    with pytest.raises(ValueError):
        random_field.sample_field(pc, np.zeros(2))


def test_hermite_zero_point_keeps_even_terms():
    kl, _ = constant_unit_kl()
    pc = random_field.lognormal_pc_coefficients(kl, mean_log=0.0, shift=0.05, order=2)
    # psi_0(0)=1, psi_1(0)=0, psi_2(0)=-1/sqrt(2)
    expect = 0.05 + math.e**0.5 * (1.0 - 0.5)
    np.testing.assert_allclose(
        random_field.sample_field(pc, np.zeros(1)), expect, rtol=1e-12
    )


def test_lognormal_samples_exceed_shift():
    kl, _ = make_kl(sigma=0.5, corr_len=2.0 / 3.0, d=4)
    pc = random_field.lognormal_pc_coefficients(kl, mean_log=1.0, shift=0.28, order=6)
    rng = np.random.default_rng(9)
    xi = rng.standard_normal((200, 4))
    vals = random_field.sample_field_batch(pc, xi)
    assert vals.min() > 0.0
