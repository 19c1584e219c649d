"""Core solver for n-dimensional quadratic BSDEs on the Brownian Markov grid:
driver abstractions, the bilinear image map, the recursive power-series
expansion of the local solution, and the Picard fixed-point solver.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .bmo import BmoConstants, hbmo_norm, radius
from .grids import GridError, Grids, GridFunction
from .numerics import backward_accumulate, gradient_x, heat_operator


class ConvergenceError(RuntimeError):
    """Raised when the Picard iteration is required to converge but did not."""


class BilinearDriver:
    """Symmetric bilinear driver f~(t, x)(u, v) given by a coefficient tensor.

    The tensor has shape (n, n, n) for constant coefficients or
    (nt+1, nx, n, n, n) for state-dependent ones, with
    f~_i(u, v) = sum_jk c[i, j, k] u_j v_k.  It is symmetrized over (j, k)
    at construction.  ``theta`` is the verified bound |f~(u,v)| <= theta|u||v|;
    when omitted it is certified by sampling random unit pairs at every grid
    node (exact for scalar drivers).
    """

    def __init__(self, tensor, grids: Grids | None = None, theta: float | None = None):
        tensor = np.asarray(tensor, dtype=float)
        if tensor.ndim not in (3, 5):
            raise GridError(f"driver tensor must have 3 or 5 axes, got {tensor.ndim}")
        tensor = 0.5 * (tensor + np.swapaxes(tensor, -1, -2))
        self.tensor = tensor
        self.grids = grids
        self.n = tensor.shape[-1]
        if tensor.ndim == 5:
            if grids is None:
                raise GridError("state-dependent driver tensor requires grids")
            if tensor.shape[:2] != (grids.time.nt + 1, grids.space.nx):
                raise GridError("driver tensor does not match the grid shape")
        if theta is None:
            theta = self._certify_theta()
        self.theta = float(theta)

    def _certify_theta(self, nsamples: int = 96, seed: int = 20260810) -> float:
        if self.tensor.ndim == 3 and self.n == 1:
            return abs(float(self.tensor[0, 0, 0]))
        rng = np.random.default_rng(seed)
        best = 0.0
        for _ in range(nsamples):
            u = rng.standard_normal(self.n)
            v = rng.standard_normal(self.n)
            u /= np.linalg.norm(u)
            v /= np.linalg.norm(v)
            if self.tensor.ndim == 3:
                img = np.einsum("ijk,j,k->i", self.tensor, u, v)
                best = max(best, float(np.linalg.norm(img)))
            else:
                img = np.einsum("txijk,j,k->txi", self.tensor, u, v)
                best = max(best, float(np.sqrt((img**2).sum(axis=-1)).max()))
        return best

    def pair_source(self, mu: GridFunction, nu: GridFunction) -> GridFunction:
        if mu.m != self.n or nu.m != self.n:
            raise GridError(
                f"driver expects {self.n}-component integrands, got {mu.m} and {nu.m}"
            )
        if self.tensor.ndim == 3:
            out = np.einsum("ijk,txj,txk->txi", self.tensor, mu.values, nu.values)
        else:
            out = np.einsum("txijk,txj,txk->txi", self.tensor, mu.values, nu.values)
        return GridFunction(mu.grids, out, check=False)

    def source(self, zeta: GridFunction) -> GridFunction:
        return self.pair_source(zeta, zeta)

    def eval_constant_z(self, z: np.ndarray, grids: Grids) -> GridFunction:
        """f~(t, x)(z, z) for one fixed z, sampled over the whole grid."""
        z = np.asarray(z, dtype=float)
        if self.tensor.ndim == 3:
            val = np.einsum("ijk,j,k->i", self.tensor, z, z)
            return GridFunction.constant(grids, val, m=self.n)
        out = np.einsum("txijk,j,k->txi", self.tensor, z, z)
        return GridFunction(grids, out, check=False)


class QuadraticDriver:
    """General driver f(t, x, z) with f(t, x, 0) = 0 and the quadratic
    Lipschitz bound |f(t,u) - f(t,v)| <= theta |u - v| (|u| + |v|).

    ``fn`` maps (t: float, x: (nx,), z: (nx, n)) -> (nx, n).  The structural
    conditions are spot-checked at construction and can be re-certified by
    sampling with :meth:`certify`.
    """

    def __init__(self, fn, n: int, theta: float, grids: Grids):
        self.fn = fn
        self.n = n
        self.theta = float(theta)
        self.grids = grids
        x = grids.space.nodes()
        zero = np.zeros((grids.space.nx, n))
        for i in (0, grids.time.nt // 2, grids.time.nt):
            t = grids.time.times()[i]
            val = np.asarray(fn(t, x, zero), dtype=float)
            if np.abs(val).max() > 1e-14:
                raise GridError(f"driver violates f(t, 0) = 0 at t={t:.6g}")

    def source(self, zeta: GridFunction) -> GridFunction:
        x = self.grids.space.nodes()
        out = np.empty_like(zeta.values)
        for i, t in enumerate(self.grids.time.times()):
            out[i] = np.asarray(self.fn(t, x, zeta.values[i]), dtype=float)
        return GridFunction(self.grids, out, check=False)

    def eval_constant_z(self, z: np.ndarray, grids: Grids) -> GridFunction:
        x = grids.space.nodes()
        zz = np.broadcast_to(np.asarray(z, dtype=float), (grids.space.nx, self.n))
        out = np.empty(grids.shape(self.n))
        for i, t in enumerate(grids.time.times()):
            out[i] = np.asarray(self.fn(t, x, zz), dtype=float)
        return GridFunction(grids, out, check=False)

    def certify(self, nsamples: int = 200, scale: float = 3.0, seed: int = 1) -> dict:
        """Probabilistic check of the quadratic Lipschitz bound on random pairs."""
        rng = np.random.default_rng(seed)
        x = self.grids.space.nodes()
        worst = 0.0
        times = self.grids.time.times()
        for _ in range(nsamples):
            t = float(rng.choice(times))
            u = scale * rng.standard_normal(self.n)
            v = scale * rng.standard_normal(self.n)
            uu = np.broadcast_to(u, (self.grids.space.nx, self.n))
            vv = np.broadcast_to(v, (self.grids.space.nx, self.n))
            gap = np.asarray(self.fn(t, x, uu)) - np.asarray(self.fn(t, x, vv))
            lhs = float(np.sqrt((gap**2).sum(axis=-1)).max())
            den = np.linalg.norm(u - v) * (np.linalg.norm(u) + np.linalg.norm(v))
            if den > 0:
                worst = max(worst, lhs / den)
        return {"sampled_modulus": worst, "theta": self.theta, "ok": worst <= self.theta * (1 + 1e-9)}


@dataclass
class BSDESpec:
    """Terminal-value problem Y_t = a h(B_T) + int_t^T f(s, zeta_s) ds - int zeta dB."""

    n: int
    driver: BilinearDriver | QuadraticDriver
    terminal: object  # callable x -> (nx,) or (nx, n)
    grids: Grids

    def terminal_values(self) -> np.ndarray:
        x = self.grids.space.nodes()
        term = np.asarray(self.terminal(x), dtype=float)
        if term.ndim == 1:
            term = term[:, None]
        if term.shape != (self.grids.space.nx, self.n):
            raise GridError(
                f"terminal slice has shape {term.shape}, expected {(self.grids.space.nx, self.n)}"
            )
        if not np.all(np.isfinite(term)):
            raise GridError("terminal condition is non-finite on the grid")
        return term

    def constants(self, kappa: float = 1.0, kappa_defaulted: bool = True) -> BmoConstants:
        return BmoConstants(theta=self.driver.theta, kappa=kappa, kappa_defaulted=kappa_defaulted)


@dataclass
class Solution:
    """Solved pair (Y, zeta) with solver diagnostics."""

    Y: GridFunction
    zeta: GridFunction
    a: float
    residual: float = math.nan
    grad_gap: float = math.nan
    hbmo_zeta: float = math.nan
    iterations: int = 0
    converged: bool = True
    history: list = field(default_factory=list)
    remainder_hbmo: float | None = None

    @property
    def contraction_factors(self) -> list:
        return [
            self.history[i + 1] / self.history[i]
            for i in range(len(self.history) - 1)
            if self.history[i] > 0
        ]


@dataclass
class ExpansionSeries:
    """Power-series coefficients (Y^(k), zeta^(k)) of the local solution."""

    order: int
    y_coeffs: list
    zeta_coeffs: list
    coeff_hbmo: list
    l_norm: float
    rho: float
    constants: BmoConstants

    @property
    def rho_is_heuristic(self) -> bool:
        return self.constants.kappa_defaulted

    def empirical_radius(self) -> float:
        """1 / max growth ratio of consecutive coefficient norms (heuristic)."""
        ratios = [
            self.coeff_hbmo[k + 1] / self.coeff_hbmo[k]
            for k in range(len(self.coeff_hbmo) - 1)
            if self.coeff_hbmo[k] > 0
        ]
        return 1.0 / max(ratios) if ratios else math.inf

    def partial_sum_bound(self) -> float:
        """Weighted partial sum sum_k ||zeta^(k)|| rho^k from the recursion bound."""
        return sum(c * self.rho**k for k, c in enumerate(self.coeff_hbmo, start=1))


def lift_terminal(spec: BSDESpec) -> tuple[GridFunction, GridFunction]:
    """First-order pair: Y1 = E_t[h(B_T)] and its representation integrand."""
    y1 = backward_accumulate(None, spec.terminal_values(), spec.grids)
    return y1, gradient_x(y1)


def bilinear_image(mu: GridFunction, nu: GridFunction, driver: BilinearDriver) -> GridFunction:
    """Representation integrand of E_t[int_0^T f~(s, mu_s, nu_s) ds].

    Builds u(t, x) = E_t[int_t^T f~ ds] by backward accumulation and returns
    its spatial gradient; in the Markov realization this is exactly the
    integrand whose stochastic integral is the martingale part.
    """
    src = driver.pair_source(mu, nu)
    return gradient_x(backward_accumulate(src, 0.0, mu.grids))


def expansion(spec: BSDESpec, order: int, kappa: float = 1.0) -> ExpansionSeries:
    """Recursive power-series coefficients of the local solution.

    zeta^(1) is the terminal lift; for k >= 2 the source
    sum_{l+m=k} f~(zeta^(l), zeta^(m)) over ordered positive pairs is
    accumulated backward, giving Y^(k), and differentiated, giving zeta^(k).
    Requires a purely quadratic (bilinear) driver.
    """
    if order < 1:
        raise ValueError(f"expansion order must be >= 1, got {order}")
    if not isinstance(spec.driver, BilinearDriver):
        raise TypeError("the power-series expansion requires a bilinear driver")
    y1, z1 = lift_terminal(spec)
    y_coeffs = [y1]
    zeta_coeffs = [z1]
    for k in range(2, order + 1):
        src = GridFunction.zeros(spec.grids, spec.n)
        for l in range(1, k):
            src = src + spec.driver.pair_source(zeta_coeffs[l - 1], zeta_coeffs[k - l - 1])
        yk = backward_accumulate(src, 0.0, spec.grids)
        y_coeffs.append(yk)
        zeta_coeffs.append(gradient_x(yk))
    norms = [hbmo_norm(z) for z in zeta_coeffs]
    constants = spec.constants(kappa=kappa)
    l_norm = norms[0]
    rho = radius(constants, l_norm) if l_norm > 0 else math.inf
    return ExpansionSeries(
        order=order,
        y_coeffs=y_coeffs,
        zeta_coeffs=zeta_coeffs,
        coeff_hbmo=norms,
        l_norm=l_norm,
        rho=rho,
        constants=constants,
    )


def evaluate_series(series: ExpansionSeries, a: float) -> Solution:
    """Sum the truncated power series at parameter ``a``.

    Attaches a geometric tail estimate built from the coefficient norms as
    ``remainder_hbmo``.  Evaluating at |a| >= rho only warns: with a defaulted
    kappa the radius is heuristic.
    """
    if math.isfinite(series.rho) and abs(a) >= series.rho:
        label = "heuristic " if series.rho_is_heuristic else ""
        warnings.warn(
            f"|a|={abs(a):.4g} is outside the {label}convergence radius rho={series.rho:.4g}",
            stacklevel=2,
        )
    grids = series.y_coeffs[0].grids
    m = series.y_coeffs[0].m
    Y = GridFunction.zeros(grids, m)
    zeta = GridFunction.zeros(grids, m)
    for k in range(series.order, 0, -1):
        Y = Y + series.y_coeffs[k - 1] * a**k
        zeta = zeta + series.zeta_coeffs[k - 1] * a**k
    terms = [c * abs(a) ** k for k, c in enumerate(series.coeff_hbmo, start=1)]
    tail = None
    if len(terms) >= 2 and terms[-2] > 0:
        q = terms[-1] / terms[-2]
        tail = terms[-1] * q / (1.0 - q) if q < 1 else math.inf
    return Solution(
        Y=Y,
        zeta=zeta,
        a=a,
        hbmo_zeta=hbmo_norm(zeta),
        iterations=series.order,
        remainder_hbmo=tail,
    )


def picard_solve(
    spec: BSDESpec,
    a: float,
    tol: float = 1e-8,
    maxit: int = 200,
    initial: GridFunction | None = None,
) -> Solution:
    """Picard iteration for the fixed point zeta = a zeta^(1) + image(zeta, zeta).

    Starts from a*zeta^(1) (so iterate k matches the series partial sums at
    leading orders) unless ``initial`` is given.  Stops when the sup-norm
    change of zeta over the core region falls below ``tol``; reaching
    ``maxit`` returns an unconverged solution carrying the iterate-norm
    history instead of raising.
    """
    if tol <= 0:
        raise ValueError(f"tol must be > 0, got {tol}")
    grids = spec.grids
    term = spec.terminal_values()
    y1 = backward_accumulate(None, term, grids)
    z1 = gradient_x(y1)
    base = z1 * a
    zeta = base.copy() if initial is None else initial.copy()
    history = []
    converged = False
    iterations = 0
    core = grids.core_mask()
    cap = 1e10 * max(1.0, float(np.abs(base.values).max()))
    for iterations in range(1, maxit + 1):
        src = spec.driver.source(zeta)
        zeta_new = base + gradient_x(backward_accumulate(src, 0.0, grids))
        delta = float(np.abs((zeta_new - zeta).values[:, core, :]).max())
        if not math.isfinite(delta) or delta > cap:
            # blow-up: keep the last finite iterate and report divergence
            history.append(math.inf)
            break
        history.append(delta)
        zeta = zeta_new
        if delta < tol:
            converged = True
            break
    src = spec.driver.source(zeta)
    Y = backward_accumulate(src, a * term, grids)
    res, gap = residual_of(spec, Y, zeta) if converged else (math.nan, math.nan)
    return Solution(
        Y=Y,
        zeta=zeta,
        a=a,
        residual=res,
        grad_gap=gap,
        hbmo_zeta=hbmo_norm(zeta),
        iterations=iterations,
        converged=converged,
        history=history,
    )


def residual_of(spec: BSDESpec, Y: GridFunction, zeta: GridFunction) -> tuple[float, float]:
    """Discrete defect of a candidate solution pair against the scheme.

    Returns (residual, grad_gap): the maximal one-step defect
    |Y_i - K(Y_{i+1} + dt/2 f_{i+1}) - dt/2 f_i| / dt over core nodes, and the
    gradient-consistency gap sup |zeta - grad_x Y|, reported separately.
    """
    grids = spec.grids
    dt = grids.time.dt
    op = heat_operator(grids.space, dt)
    f = spec.driver.source(zeta).values
    y = Y.values
    core = grids.core_mask()
    worst = 0.0
    for i in range(grids.time.nt):
        defect = y[i] - op.apply(y[i + 1] + 0.5 * dt * f[i + 1]) - 0.5 * dt * f[i]
        worst = max(worst, float(np.abs(defect[core]).max()))
    gap = float(np.abs((zeta - gradient_x(Y)).values[:, core, :]).max())
    return worst / dt, gap


def residual(spec: BSDESpec, solution: Solution, a: float | None = None) -> tuple[float, float]:
    """Scheme defect and gradient gap of a solution on its own grids."""
    if solution.Y.grids != spec.grids:
        raise GridError("solution and spec live on different grids")
    return residual_of(spec, solution.Y, solution.zeta)
