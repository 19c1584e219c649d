"""Deterministic grid calculus: Gaussian conditional expectations, backward
accumulation of running integrals, martingale-representation integrands by
spatial differentiation, Gauss-Hermite oracles, and Brownian path sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grids import GridError, Grids, GridFunction, SpaceGrid, TimeGrid

KERNEL_TRUNCATION = 8.0  # kernel support in standard deviations


def kernel_weights(dt: float, dx: float, truncation: float = KERNEL_TRUNCATION):
    """Discrete N(0, dt) kernel on offsets k*dx, truncated at ``truncation`` sigmas.

    The sampled Gaussian weights are corrected so that the zeroth and second
    moments are matched exactly (odd moments vanish by symmetry), which makes
    one convolution step exact on all polynomials of degree <= 2 despite
    truncation and discreteness.  Weights stay positive provided dt <= dx**2
    in the sub-grid regime sqrt(dt) << dx; for sqrt(dt) >~ dx they are
    indistinguishable from exact Gaussian quadrature.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    sigma = math.sqrt(dt)
    kmax = max(1, int(math.ceil(truncation * sigma / dx)))
    offsets = np.arange(-kmax, kmax + 1)
    y = offsets * dx
    w0 = np.exp(-0.5 * (y / sigma) ** 2)
    w0 /= w0.sum()
    m2 = float(np.sum(w0 * y**2))
    m4 = float(np.sum(w0 * y**4))
    det = m4 - m2 * m2
    alpha = (m4 - dt * m2) / det
    beta = (dt - m2) / det
    w = w0 * (alpha + beta * y**2)
    if w.min() < -1e-12:
        raise ValueError(
            f"kernel weights not positive (min {w.min():.3e}); "
            f"decrease dt below dx^2 or refine the space grid"
        )
    return offsets, w


class HeatOperator:
    """One backward conditional-expectation step E[u(x + sqrt(dt) Z)] on a grid.

    Constant extrapolation is used beyond the grid edges: out-of-range kernel
    mass is folded onto the boundary nodes.
    """

    def __init__(self, space: SpaceGrid, dt: float, truncation: float = KERNEL_TRUNCATION):
        self.space = space
        self.dt = dt
        offsets, weights = kernel_weights(dt, space.dx, truncation)
        self.offsets = offsets
        self.weights = weights
        nx = space.nx
        mat = np.zeros((nx, nx))
        rows = np.arange(nx)
        for k, wk in zip(offsets, weights):
            cols = np.clip(rows + k, 0, nx - 1)
            np.add.at(mat, (rows, cols), wk)
        # pin row sums at 1 so constants survive to the last ulp
        mat[rows, rows] += 1.0 - mat.sum(axis=1)
        self.matrix = mat

    def apply(self, values: np.ndarray) -> np.ndarray:
        return self.matrix @ values

    def apply_tilted(self, values: np.ndarray, drift: np.ndarray) -> np.ndarray:
        """Expectation under the exponential tilt exp(-a*dB - a^2*dt/2), a = drift(x).

        Realizes one step of E_t[exp(-a (B_{t+dt}-B_t) - a^2 dt/2) u(B_{t+dt})]
        with the same discrete kernel and boundary handling as :meth:`apply`.
        """
        nx = self.space.nx
        out = np.zeros_like(values, dtype=float)
        rows = np.arange(nx)
        for k, wk in zip(self.offsets, self.weights):
            cols = np.clip(rows + k, 0, nx - 1)
            tilt = wk * np.exp(-drift * (k * self.space.dx))
            out += tilt[:, None] * values[cols] if values.ndim == 2 else tilt * values[cols]
        damp = np.exp(-0.5 * drift**2 * self.dt)
        return out * (damp[:, None] if values.ndim == 2 else damp)


_OPERATOR_CACHE: dict[tuple, HeatOperator] = {}


def heat_operator(space: SpaceGrid, dt: float) -> HeatOperator:
    key = (space.x_max, space.nx, round(dt, 15))
    op = _OPERATOR_CACHE.get(key)
    if op is None:
        op = _OPERATOR_CACHE[key] = HeatOperator(space, dt)
    return op


def heat_step(u_next: np.ndarray, dt: float, space: SpaceGrid) -> np.ndarray:
    """Backward step of the conditional expectation for one time slice.

    Returns v(x) = E[u_next(x + sqrt(dt) Z)], Z standard normal, with the
    kernel truncated at 8 sigmas and constant extrapolation beyond the edges.
    Exact on polynomials of degree <= 2.
    """
    u_next = np.asarray(u_next, dtype=float)
    if u_next.shape[0] != space.nx:
        raise GridError(f"slice has {u_next.shape[0]} nodes, grid has {space.nx}")
    if not np.all(np.isfinite(u_next)):
        bad = int(np.argwhere(~np.isfinite(u_next))[0][0])
        raise GridError(
            f"non-finite input to heat_step at x_index={bad} (x={space.nodes()[bad]:.6g})"
        )
    return heat_operator(space, dt).apply(u_next)


def backward_accumulate(
    source: GridFunction | None,
    terminal: np.ndarray | float,
    grids: Grids,
    m: int | None = None,
) -> GridFunction:
    """Accumulate u(t, x) = E[ terminal(B_T) + int_t^T source(s, B_s) ds | B_t = x ].

    The time integral uses the trapezoidal rule on grid steps,
    u_i = K (u_{i+1} + dt/2 * s_{i+1}) + dt/2 * s_i, which keeps the whole
    sweep linear in (source, terminal) and integrates polynomial sources of
    degree <= 2 in x exactly.
    """
    nt, nx = grids.time.nt, grids.space.nx
    if source is not None:
        if source.grids != grids:
            raise GridError("source is defined on different grids")
        m_src = source.m
        if m is None:
            m = m_src
        elif m != m_src:
            raise GridError(f"source has {m_src} components, expected {m}")
    term = np.asarray(terminal, dtype=float)
    if term.ndim == 0:
        term = np.full((nx, 1 if m is None else m), float(term))
    if term.ndim == 1:
        term = term[:, None]
    if m is None:
        m = term.shape[1]
    if term.shape != (nx, m):
        raise GridError(f"terminal slice has shape {term.shape}, expected {(nx, m)}")
    if not np.all(np.isfinite(term)):
        raise GridError("non-finite terminal condition")

    op = heat_operator(grids.space, grids.time.dt)
    half = 0.5 * grids.time.dt
    out = np.empty((nt + 1, nx, m))
    out[nt] = term
    if source is None:
        for i in range(nt - 1, -1, -1):
            out[i] = op.apply(out[i + 1])
    else:
        s = source.values
        for i in range(nt - 1, -1, -1):
            out[i] = op.apply(out[i + 1] + half * s[i + 1]) + half * s[i]
    return GridFunction(grids, out, check=False)


def gradient_x(u: GridFunction) -> GridFunction:
    """Spatial derivative: central differences inside, one-sided 2nd order at edges.

    In the Markov realization this is the martingale-representation integrand
    of the conditional-expectation field ``u``.  Exact on quadratics at
    interior nodes and on affine functions everywhere.
    """
    dx = u.grids.space.dx
    v = u.values
    out = np.empty_like(v)
    out[:, 1:-1] = (v[:, 2:] - v[:, :-2]) / (2.0 * dx)
    out[:, 0] = (-3.0 * v[:, 0] + 4.0 * v[:, 1] - v[:, 2]) / (2.0 * dx)
    out[:, -1] = (3.0 * v[:, -1] - 4.0 * v[:, -2] + v[:, -3]) / (2.0 * dx)
    return GridFunction(u.grids, out, check=False)


def quad_expect(h, mean: float, variance: float, nodes: int = 64) -> float:
    """Gauss-Hermite evaluation of E[h(N(mean, variance))].

    Exact for polynomials of degree < 2*nodes; used as the independent
    quadrature oracle throughout the test suite.
    """
    if variance < 0:
        raise ValueError(f"variance must be >= 0, got {variance}")
    if variance == 0:
        return float(np.asarray(h(np.asarray([mean])))[0])
    x, w = np.polynomial.hermite_e.hermegauss(nodes)
    pts = mean + math.sqrt(variance) * x
    return float(np.sum(w * np.asarray(h(pts), dtype=float)) / math.sqrt(2.0 * math.pi))


@dataclass(frozen=True)
class PathBundle:
    """Brownian increments on a time grid, reproducible from the seed."""

    seed: int
    npaths: int
    time: TimeGrid
    increments: np.ndarray  # (npaths, nt), i.i.d. N(0, dt)

    @property
    def nsteps(self) -> int:
        return self.time.nt

    def positions(self) -> np.ndarray:
        """Path positions B_{t_i}, shape (npaths, nt+1), starting at 0."""
        out = np.empty((self.npaths, self.time.nt + 1))
        out[:, 0] = 0.0
        np.cumsum(self.increments, axis=1, out=out[:, 1:])
        return out

    def blocks(self, block_size: int = 20000):
        """Yield (slice, positions_block) pairs to bound peak memory."""
        for lo in range(0, self.npaths, block_size):
            hi = min(lo + block_size, self.npaths)
            pos = np.empty((hi - lo, self.time.nt + 1))
            pos[:, 0] = 0.0
            np.cumsum(self.increments[lo:hi], axis=1, out=pos[:, 1:])
            yield slice(lo, hi), pos


def sample_paths(
    seed: int,
    npaths: int,
    time: TimeGrid,
    max_elements: int = 200_000_000,
) -> PathBundle:
    """Draw ``npaths`` Brownian increment sequences on ``time``.

    Deterministic for a fixed seed.  Rejects requests whose increment array
    would exceed the ``max_elements`` memory budget.
    """
    if npaths < 1:
        raise ValueError(f"npaths must be >= 1, got {npaths}")
    n_elem = npaths * time.nt
    if n_elem > max_elements:
        raise MemoryError(
            f"path bundle of {npaths} x {time.nt} increments exceeds the "
            f"memory budget of {max_elements} elements"
        )
    rng = np.random.default_rng(seed)
    inc = rng.standard_normal((npaths, time.nt)) * math.sqrt(time.dt)
    tol = 5.0 / math.sqrt(n_elem)
    mean = float(inc.mean())
    if abs(mean) > tol:
        raise ValueError(
            f"increment sample mean {mean:.3e} exceeds the {tol:.3e} sanity bound"
        )
    return PathBundle(seed=seed, npaths=npaths, time=time, increments=inc)


def interp_slice(field_slice: np.ndarray, space: SpaceGrid, x: np.ndarray) -> np.ndarray:
    """Linear interpolation of one (nx,) or (nx, m) slice at positions x."""
    nodes = space.nodes()
    if field_slice.ndim == 1:
        return np.interp(x, nodes, field_slice)
    return np.stack(
        [np.interp(x, nodes, field_slice[:, j]) for j in range(field_slice.shape[1])],
        axis=-1,
    )
