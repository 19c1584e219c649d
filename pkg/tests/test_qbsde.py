import math

import numpy as np
import pytest

from qbsdelab import (
    BSDESpec,
    BilinearDriver,
    GridFunction,
    Grids,
    QuadraticDriver,
    bilinear_image,
    evaluate_series,
    expansion,
    hbmo_norm,
    lift_terminal,
    picard_solve,
    quad_expect,
    residual,
)
from qbsdelab.qbsde import residual_of
from helpers import cole_hopf_field


# ------------------------------------------------------------ lift_terminal


def test_lift_linear(coarse, half_driver):
    spec = BSDESpec(1, half_driver, lambda x: x, coarse)
    y1, z1 = lift_terminal(spec)
    core = coarse.core_mask()
    x = coarse.space.nodes()
    assert np.abs(y1.values[:, core, 0] - x[core]).max() < 1e-9
    assert np.abs(z1.values[:, core, 0] - 1.0).max() < 1e-9


def test_lift_constant(coarse, half_driver):
    spec = BSDESpec(1, half_driver, lambda x: 5.0 + 0.0 * x, coarse)
    y1, z1 = lift_terminal(spec)
    assert np.abs(y1.values - 5.0).max() < 1e-12
    assert np.abs(z1.values).max() < 1e-12


def test_lift_square(coarse, half_driver):
    spec = BSDESpec(1, half_driver, lambda x: x**2, coarse)
    y1, z1 = lift_terminal(spec)
    x = coarse.space.nodes()
    tau = coarse.time.horizon - coarse.time.times()[:, None]
    core = coarse.core_mask()
    assert np.abs(y1.values[:, :, 0] - (x**2 + tau))[:, core].max() < 1e-9
    assert np.abs(z1.values[:, :, 0] - 2 * x)[:, core].max() < 1e-8


# ---------------------------------------------------------- bilinear_image


def test_bilinear_image_deterministic_integrand_is_null(coarse, half_driver):
    ones = GridFunction.constant(coarse, 1.0)
    z = bilinear_image(ones, ones, half_driver)
    assert np.abs(z.values).max() < 1e-12


def test_bilinear_image_quadratic_oracle(coarse, half_driver):
    mu = GridFunction.from_callable(coarse, lambda t, x: 2.0 * x)
    z = bilinear_image(mu, mu, half_driver)
    x = coarse.space.nodes()
    tau = coarse.time.horizon - coarse.time.times()[:, None]
    core = coarse.core_mask()
    assert np.abs(z.values[:, :, 0] - 4 * x * tau)[:, core].max() < 1e-8


def test_bilinear_image_symmetry_and_bilinearity(coarse, half_driver):
    rng = np.random.default_rng(12)
    mu = GridFunction(coarse, rng.standard_normal(coarse.shape(1)))
    nu = GridFunction(coarse, rng.standard_normal(coarse.shape(1)))
    extra = GridFunction(coarse, rng.standard_normal(coarse.shape(1)))
    ab = bilinear_image(mu, nu, half_driver)
    ba = bilinear_image(nu, mu, half_driver)
    assert np.abs((ab - ba).values).max() < 1e-12
    a = -1.3
    lhs = bilinear_image(a * mu + extra, nu, half_driver)
    rhs = a * bilinear_image(mu, nu, half_driver) + bilinear_image(extra, nu, half_driver)
    scale = max(1.0, np.abs(rhs.values).max())
    assert np.abs((lhs - rhs).values).max() <= 1e-12 * scale


# --------------------------------------------------------------- expansion


def test_expansion_linear_terminal_terminates(grids, half_driver):
    # Cole-Hopf: Y = a B_t + a^2 (T - t)/2, so only the first two orders live
    spec = BSDESpec(1, half_driver, lambda x: x, grids)
    ser = expansion(spec, 4)
    core = grids.core_mask()
    assert np.abs(ser.zeta_coeffs[0].values[:, core, :] - 1.0).max() < 1e-9
    assert np.abs(ser.zeta_coeffs[1].values[:, core, :]).max() < 1e-8
    tau = grids.time.horizon - grids.time.times()[:, None]
    assert np.abs(ser.y_coeffs[1].values[:, :, 0] - 0.5 * tau)[:, core].max() < 1e-6
    assert np.abs(ser.zeta_coeffs[3].values[:, core, :]).max() < 1e-8
    assert np.abs(ser.y_coeffs[3].values[:, core, :]).max() < 1e-6


def test_expansion_zero_terminal(coarse, half_driver):
    spec = BSDESpec(1, half_driver, lambda x: 0.0 * x, coarse)
    ser = expansion(spec, 3)
    for yk, zk in zip(ser.y_coeffs, ser.zeta_coeffs):
        assert np.abs(yk.values).max() == 0.0
        assert np.abs(zk.values).max() == 0.0


def test_expansion_zero_driver_is_linear(coarse):
    drv = BilinearDriver(np.zeros((1, 1, 1)), theta=1e-12)
    spec = BSDESpec(1, drv, lambda x: np.sin(x), coarse)
    ser = expansion(spec, 3)
    for k in (1, 2):
        assert np.abs(ser.zeta_coeffs[k].values).max() < 1e-14
        assert np.abs(ser.y_coeffs[k].values).max() < 1e-14


def test_expansion_requires_bilinear_and_positive_order(coarse, half_driver):
    quad = QuadraticDriver(lambda t, x, z: 0.5 * z * np.abs(z), 1, 0.5, coarse)
    spec = BSDESpec(1, quad, lambda x: x, coarse)
    with pytest.raises(TypeError):
        expansion(spec, 2)
    with pytest.raises(ValueError):
        expansion(BSDESpec(1, half_driver, lambda x: x, coarse), 0)


def test_cumulant_identity_at_root(coarse, half_driver):
    # For n = 1 and f~ = c uv/2, Y^(k)(0, 0) = c^(k-1) kappa_k / k! with
    # kappa_k the cumulants of h(B_T); oracle via Gauss-Hermite moments.
    h = lambda x: x + 0.2 * x**2
    spec = BSDESpec(1, half_driver, h, coarse)
    ser = expansion(spec, 4)
    T = coarse.time.horizon
    m = [quad_expect(lambda y: h(y) ** j, 0.0, T, nodes=96) for j in range(1, 5)]
    k1 = m[0]
    k2 = m[1] - m[0] ** 2
    k3 = m[2] - 3 * m[1] * m[0] + 2 * m[0] ** 3
    k4 = m[3] - 4 * m[2] * m[0] - 3 * m[1] ** 2 + 12 * m[1] * m[0] ** 2 - 6 * m[0] ** 4
    c = 1.0  # f~ = c uv / 2 with c = 1
    origin = coarse.space.origin_index
    for k, kap in enumerate([k1, k2, k3, k4], start=1):
        got = ser.y_coeffs[k - 1].values[0, origin, 0]
        want = c ** (k - 1) * kap / math.factorial(k)
        assert got == pytest.approx(want, rel=2e-3, abs=2e-5)


def test_lemma2_partial_sum_bound(square_spec):
    ser = expansion(square_spec, 6)
    theta = square_spec.driver.theta
    assert ser.partial_sum_bound() <= 1.0 / (4.0 * 1.0 * theta) + 1e-12
    # first term is exactly rho * ||L|| = 1/(8 kappa Theta) by construction
    assert ser.coeff_hbmo[0] * ser.rho == pytest.approx(1.0 / (8.0 * theta), rel=1e-12)


# --------------------------------------------------------- evaluate_series


def test_evaluate_series_at_zero(coarse, half_driver):
    ser = expansion(BSDESpec(1, half_driver, lambda x: x**2, coarse), 3)
    sol = evaluate_series(ser, 0.0)
    assert np.abs(sol.Y.values).max() == 0.0
    assert np.abs(sol.zeta.values).max() == 0.0


def test_evaluate_series_gaussian_cole_hopf(grids, gaussian_spec):
    ser = expansion(gaussian_spec, 3)
    sol = evaluate_series(ser, 0.2)
    oracle = cole_hopf_field(grids, 0.2, kind="linear")
    core = grids.core_mask()
    assert np.abs(sol.Y.values[:, :, 0] - oracle)[:, core].max() < 1e-6


def test_evaluate_series_partial_sum_tail(square_spec):
    ser = expansion(square_spec, 5)
    a = 0.05
    s4 = evaluate_series(
        expansion(square_spec, 4), a
    )
    s5 = evaluate_series(ser, a)
    gap = hbmo_norm(s5.zeta - s4.zeta)
    assert gap == pytest.approx(ser.coeff_hbmo[4] * a**5, rel=1e-10)


def test_evaluate_series_warns_outside_radius(square_spec):
    ser = expansion(square_spec, 2)
    with pytest.warns(UserWarning, match="outside the heuristic convergence radius"):
        evaluate_series(ser, 2.0 * ser.rho)


# ------------------------------------------------------------ picard_solve


def test_picard_zero_parameter(coarse, half_driver):
    spec = BSDESpec(1, half_driver, lambda x: x**2, coarse)
    sol = picard_solve(spec, 0.0)
    assert sol.iterations == 1 and sol.converged
    assert np.abs(sol.Y.values).max() == 0.0
    assert np.abs(sol.zeta.values).max() == 0.0


def test_picard_zero_terminal_zero_solution(coarse, half_driver):
    spec = BSDESpec(1, half_driver, lambda x: 0.0 * x, coarse)
    sol = picard_solve(spec, 0.3)
    assert np.abs(sol.Y.values).max() == 0.0
    assert np.abs(sol.zeta.values).max() == 0.0


def test_picard_gaussian_cole_hopf(grids, gaussian_spec):
    sol = picard_solve(gaussian_spec, 0.2, tol=1e-10)
    oracle = cole_hopf_field(grids, 0.2, kind="linear")
    core = grids.core_mask()
    assert sol.converged
    assert np.abs(sol.Y.values[:, :, 0] - oracle)[:, core].max() < 1e-6


def test_picard_square_cole_hopf_quadrature(grids, square_spec):
    # (1/c) log E_t[exp(c a B_T^2)] with 2 c a tau < 1
    a = 0.1
    sol = picard_solve(square_spec, a, tol=1e-10)
    oracle = cole_hopf_field(grids, a, kind="square")
    core = grids.core_mask()
    assert np.abs(sol.Y.values[:, :, 0] - oracle)[:, core].max() < 1e-4
    # spot-check the closed form itself against direct quadrature
    got = math.log(quad_expect(lambda y: np.exp(a * y**2), 1.0, 1.0, nodes=96))
    assert got == pytest.approx(a / 0.8 + 0.5 * math.log(1.25), rel=1e-12)


def test_picard_quadratic_driver_path(grids):
    # same fixed point through the general (A3) route: f(z) = z^2/2
    drv = QuadraticDriver(lambda t, x, z: 0.5 * z**2, 1, 0.5, grids)
    spec = BSDESpec(1, drv, lambda x: x, grids)
    sol = picard_solve(spec, 0.2, tol=1e-10)
    oracle = cole_hopf_field(grids, 0.2, kind="linear")
    core = grids.core_mask()
    assert np.abs(sol.Y.values[:, :, 0] - oracle)[:, core].max() < 1e-6


def test_picard_uniqueness_across_initializations(coarse, half_driver):
    spec = BSDESpec(1, half_driver, lambda x: x**2, coarse)
    tol = 1e-10
    sol_a = picard_solve(spec, 0.1, tol=tol)
    sol_b = picard_solve(spec, 0.1, tol=tol, initial=GridFunction.zeros(coarse))
    gap = np.abs((sol_a.zeta - sol_b.zeta).values[:, coarse.core_mask(), :]).max()
    assert gap < 10 * tol


def test_picard_divergence_report(coarse, half_driver):
    spec = BSDESpec(1, half_driver, lambda x: x**2, coarse)
    sol = picard_solve(spec, 6.0, tol=1e-10, maxit=25)
    assert not sol.converged
    assert 0 < len(sol.history) <= 25
    assert sol.history[-1] > sol.history[0]  # iterate norms blow up


def test_series_picard_geometric_agreement(square_spec):
    a = 0.1
    ser = expansion(square_spec, 6)
    sol = picard_solve(square_spec, a, tol=1e-12)
    diffs = []
    part = GridFunction.zeros(square_spec.grids, 1)
    for k in range(1, 7):
        part = part + ser.zeta_coeffs[k - 1] * a**k
        diffs.append(hbmo_norm(sol.zeta - part))
    ratios = [diffs[i + 1] / diffs[i] for i in range(5)]
    assert all(r < 1.0 for r in ratios)
    assert max(ratios) <= abs(a) / ser.empirical_radius() + 0.1


# ---------------------------------------------------------------- residual


def test_residual_of_solver_output_is_small(coarse, half_driver):
    spec = BSDESpec(1, half_driver, lambda x: x**2, coarse)
    sol = picard_solve(spec, 0.1, tol=1e-10)
    assert sol.residual < 1e-10
    assert sol.grad_gap < 1e-9


def test_residual_detects_perturbation(coarse, half_driver):
    spec = BSDESpec(1, half_driver, lambda x: x**2, coarse)
    sol = picard_solve(spec, 0.1, tol=1e-10)
    eps = 1e-4
    bad = sol.Y.copy()
    bad.values[coarse.time.nt // 2, coarse.space.origin_index, 0] += eps
    res, _ = residual_of(spec, bad, sol.zeta)
    assert res >= eps / coarse.time.dt * 0.99


def test_residual_order_under_refinement(half_driver):
    # inject the exact continuum solution; defect per unit time shrinks at
    # least linearly (measured ~ dt^2 with the trapezoidal rule)
    a = 0.1
    res = []
    for nt, nx in ((50, 111), (100, 221)):
        g = Grids.wide(1.0, nt=nt, nx=nx)
        spec = BSDESpec(1, half_driver, lambda x: x**2, g)
        vals = cole_hopf_field(g, a, kind="square")[:, :, None]
        Y = GridFunction(g, vals)
        from qbsdelab.numerics import gradient_x

        r, _ = residual_of(spec, Y, gradient_x(Y))
        res.append(r)
    assert res[1] < res[0] / 2.0  # at least order 1 in dt


def test_residual_grid_mismatch(coarse, grids, half_driver):
    spec = BSDESpec(1, half_driver, lambda x: x**2, coarse)
    sol = picard_solve(spec, 0.05)
    other = BSDESpec(1, half_driver, lambda x: x**2, grids)
    with pytest.raises(Exception):
        residual(other, sol)
