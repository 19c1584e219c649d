import math

import numpy as np
import pytest

from qbsdelab import (
    GridError,
    GridFunction,
    Grids,
    backward_accumulate,
    gradient_x,
    heat_step,
    quad_expect,
    sample_paths,
)
from qbsdelab.numerics import heat_operator


# ---------------------------------------------------------------- heat_step


def test_heat_step_preserves_constants_exactly(coarse):
    u = np.full(coarse.space.nx, 3.0)
    v = heat_step(u, 0.01, coarse.space)
    assert np.max(np.abs(v - 3.0)) < 5e-15  # row sums pinned at 1; BLAS order costs <= 1 ulp


def test_heat_step_affine_martingale(coarse):
    x = coarse.space.nodes()
    v = heat_step(x, 0.01, coarse.space)
    core = coarse.core_mask()
    assert np.max(np.abs(v - x)[core]) < 1e-12


def test_heat_step_quadratic_second_moment(coarse):
    x = coarse.space.nodes()
    v = heat_step(x**2, 0.01, coarse.space)
    core = coarse.core_mask()
    assert np.max(np.abs(v - (x**2 + 0.01))[core]) < 1e-10


def test_heat_step_rejects_non_finite(coarse):
    u = np.zeros(coarse.space.nx)
    u[7] = np.inf
    with pytest.raises(GridError) as exc:
        heat_step(u, 0.01, coarse.space)
    assert "x_index=7" in str(exc.value)


def test_kernel_weights_positive_and_normalized(coarse):
    op = heat_operator(coarse.space, coarse.time.dt)
    assert op.weights.min() >= 0
    assert op.weights.sum() == pytest.approx(1.0, abs=1e-14)
    y = op.offsets * coarse.space.dx
    assert float(np.sum(op.weights * y**2)) == pytest.approx(coarse.time.dt, rel=1e-13)


# ------------------------------------------------------ backward_accumulate


def test_accumulate_constant_source(coarse):
    src = GridFunction.constant(coarse, 2.5)
    u = backward_accumulate(src, 0.0, coarse)
    tau = coarse.time.horizon - coarse.time.times()[:, None]
    assert np.allclose(u.values[:, :, 0], 2.5 * tau, atol=1e-12)


def test_accumulate_terminal_square(coarse):
    x = coarse.space.nodes()
    u = backward_accumulate(None, x**2, coarse)
    tau = coarse.time.horizon - coarse.time.times()[:, None]
    core = coarse.core_mask()
    assert np.max(np.abs(u.values[:, :, 0] - (x**2 + tau))[:, core]) < 1e-9


def quadrature_running_integral(grids, integrand, t, x, nsub=400):
    """Independent oracle for E[int_t^T g(B_s) ds | B_t = x] via Gauss-Hermite
    in space and a fine Simpson rule in time."""
    T = grids.time.horizon
    s = np.linspace(t, T, 2 * nsub + 1)
    vals = np.array([quad_expect(integrand, x, si - t) for si in s])
    w = np.ones_like(s)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return float(np.sum(w * vals) * (s[1] - s[0]) / 3.0)


def test_accumulate_quadratic_source_matches_quadrature_oracle(coarse):
    # source 2 x^2: the bilinear image of mu = nu = 2x under f~(u,v) = uv/2
    src = GridFunction.from_callable(coarse, lambda t, x: 2.0 * x**2)
    u = backward_accumulate(src, 0.0, coarse)
    times = coarse.time.times()
    xs = coarse.space.nodes()
    for ti, xi in [(0, 0.0), (0, 2.0), (coarse.time.nt // 2, -1.5)]:
        oracle = quadrature_running_integral(
            coarse, lambda y: 2.0 * y**2, times[ti], xi
        )
        j = int(np.argmin(np.abs(xs - xi)))
        assert u.values[ti, j, 0] == pytest.approx(oracle, abs=5e-9)
    # closed form 2 x^2 (T - t) + (T - t)^2, exact under the trapezoidal rule
    tau = coarse.time.horizon - times[:, None]
    core = coarse.core_mask()
    err = np.abs(u.values[:, :, 0] - (2 * xs**2 * tau + tau**2))[:, core].max()
    assert err < 1e-8


def test_accumulate_linearity(coarse):
    rng = np.random.default_rng(7)
    s1 = GridFunction(coarse, rng.standard_normal(coarse.shape(1)))
    s2 = GridFunction(coarse, rng.standard_normal(coarse.shape(1)))
    g1 = rng.standard_normal(coarse.space.nx)
    g2 = rng.standard_normal(coarse.space.nx)
    a = 1.7
    lhs = backward_accumulate(a * s1 + s2, a * g1 + g2, coarse)
    rhs = a * backward_accumulate(s1, g1, coarse) + backward_accumulate(s2, g2, coarse)
    scale = np.abs(rhs.values).max()
    assert np.abs((lhs - rhs).values).max() <= 1e-12 * scale


def test_accumulate_tower_property(coarse):
    x = coarse.space.nodes()
    u = backward_accumulate(None, np.sin(x) + 0.3 * x**2, coarse)
    r = coarse.time.nt // 2
    slice_r = u.values[r, :, 0].copy()
    for _ in range(r):
        slice_r = heat_step(slice_r, coarse.time.dt, coarse.space)
    ref = u.values[0, :, 0]
    core = coarse.core_mask()
    assert np.abs(slice_r - ref)[core].max() <= 1e-12 * max(1.0, np.abs(ref).max())


def test_accumulate_dimension_mismatch(coarse):
    src = GridFunction.zeros(coarse, m=2)
    with pytest.raises(GridError):
        backward_accumulate(src, np.zeros(coarse.space.nx), coarse)


# ------------------------------------------------------------- gradient_x


def test_gradient_affine_and_quadratic(coarse):
    x = coarse.space.nodes()
    lin = GridFunction.from_callable(coarse, lambda t, y: y)
    g = gradient_x(lin)
    assert np.abs(g.values - 1.0).max() < 1e-12
    sq = GridFunction.from_callable(coarse, lambda t, y: y**2)
    g2 = gradient_x(sq).values[:, :, 0]
    assert np.abs(g2 - 2 * x).max() < 1e-9  # one-sided edge stencil is quadratic-exact


def test_gradient_of_accumulated_quadratic_source(coarse):
    src = GridFunction.from_callable(coarse, lambda t, x: 2.0 * x**2)
    u = backward_accumulate(src, 0.0, coarse)
    g = gradient_x(u).values[:, :, 0]
    x = coarse.space.nodes()
    tau = coarse.time.horizon - coarse.time.times()[:, None]
    core = coarse.core_mask()
    assert np.abs(g - 4 * x * tau)[:, core].max() < 1e-8


def test_gradient_richardson_order_dx2():
    # sub-grid kernel regime so the dx^2 moment defect dominates
    errs = []
    for nx in (201, 401):
        g = Grids.make(1.0, nt=3200, nx=nx, x_max=10.0, core_halfwidth=4.0)
        x = g.space.nodes()
        u = backward_accumulate(None, np.sin(x), g)
        grad = gradient_x(u).values[0, :, 0]
        exact = math.exp(-0.5) * np.cos(x)
        errs.append(np.abs(grad - exact)[g.core_mask()].max())
    ratio = errs[0] / errs[1]
    assert 3.0 < ratio < 5.5  # order ~ dx^2


# ------------------------------------------------------------- quad_expect


def test_quad_expect_examples():
    assert quad_expect(lambda x: x, 1.3, 2.0) == pytest.approx(1.3, abs=1e-12)
    assert quad_expect(lambda x: x**2, 0.0, 0.7) == pytest.approx(0.7, abs=1e-12)
    assert quad_expect(np.exp, 0.0, 1.0) == pytest.approx(math.exp(0.5), rel=1e-12)
    assert quad_expect(np.cos, 0.4, 0.0) == pytest.approx(math.cos(0.4), rel=1e-14)
    with pytest.raises(ValueError):
        quad_expect(np.exp, 0.0, -1.0)


# ------------------------------------------------------------ sample_paths


def test_paths_deterministic_from_seed():
    tg = Grids.make(1.0, nt=50, nx=11, x_max=6.0).time
    b1 = sample_paths(1, npaths=2, time=tg)
    b2 = sample_paths(1, npaths=2, time=tg)
    assert np.array_equal(b1.increments, b2.increments)
    b3 = sample_paths(2, npaths=2, time=tg)
    assert not np.array_equal(b1.increments, b3.increments)


def test_paths_terminal_statistics():
    tg = Grids.make(1.0, nt=200, nx=11, x_max=6.0).time
    b = sample_paths(123, npaths=100_000, time=tg)
    bt = b.positions()[:, -1]
    assert abs(bt.var() - 1.0) < 0.02
    assert abs(bt.mean()) < 3.0 / math.sqrt(b.npaths)


def test_paths_memory_budget():
    tg = Grids.make(1.0, nt=1000, nx=11, x_max=6.0).time
    with pytest.raises(MemoryError):
        sample_paths(0, npaths=10**7, time=tg, max_elements=10**6)


def test_path_blocks_match_positions():
    tg = Grids.make(1.0, nt=20, nx=11, x_max=6.0).time
    b = sample_paths(5, npaths=1000, time=tg)
    pos = b.positions()
    rebuilt = np.vstack([blk for _, blk in b.blocks(block_size=128)])
    assert np.array_equal(pos, rebuilt)
