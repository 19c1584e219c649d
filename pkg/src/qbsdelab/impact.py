"""Dealer price-impact model: equilibrium prices from the quadratic BSDE
system, the simple-demand backward-induction oracle, demand stability, the
small-risk-aversion expansion, and scaling/homogeneity reports.

Stock prices S (terminal value = the dividend), the market price of risk
alpha, and the volatility sigma are recovered from the solution (aR, aS) of
the (n+1)-dimensional system driven by the bilinear map

    g1(u, v; w) = ((u_2^* w) . (v_2^* w) - u_1 . v_1) / 2
    g2(u, v; w) = -(u_2 v_1 + v_2 u_1 + (u_2 v_2^* + v_2 u_2^*) w) / 2

with w the demand, via alpha = eta + theta^* gamma and sigma = theta / a.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .bmo import BmoConstants, fv_norm, hbmo_norm, hp_norm, terminal_bmo_norm
from .grids import GridError, Grids, GridFunction
from .numerics import (
    backward_accumulate,
    gradient_x,
    heat_operator,
    interp_slice,
    quad_expect,
)
from .qbsde import BSDESpec, BilinearDriver, Solution, expansion, picard_solve


class PriceSolveError(RuntimeError):
    """Raised when the equilibrium Picard solve fails to converge."""


@dataclass(frozen=True)
class SimpleDemand:
    """Piecewise-constant demand with deterministic breakpoints.

    ``levels[i]`` holds on the interval (breakpoints[i], breakpoints[i+1]];
    each level is a length-n vector.  The backward-induction oracle requires
    constant levels; the Markov engine additionally accepts callables x ->
    values, re-evaluated at the running state.
    """

    breakpoints: tuple
    levels: tuple

    def __post_init__(self):
        bp = np.asarray(self.breakpoints, dtype=float)
        if bp.ndim != 1 or len(bp) < 2:
            raise GridError("need at least two breakpoints")
        if bp[0] != 0.0:
            raise GridError("first breakpoint must be 0")
        if np.any(np.diff(bp) <= 0):
            raise GridError("breakpoints must be strictly increasing")
        if len(self.levels) != len(bp) - 1:
            raise GridError(
                f"{len(bp) - 1} periods require {len(bp) - 1} levels, got {len(self.levels)}"
            )

    @property
    def nperiods(self) -> int:
        return len(self.levels)

    def has_constant_levels(self) -> bool:
        return all(not callable(lv) for lv in self.levels)

    def period_of(self, t: float) -> int:
        """Index i with t in (tau_i, tau_{i+1}]; t = 0 belongs to period 0."""
        bp = self.breakpoints
        for i in range(self.nperiods):
            if t <= bp[i + 1] or i == self.nperiods - 1:
                if t > bp[i] or i == 0:
                    return i
        return self.nperiods - 1

    def level_values(self, i: int, x: np.ndarray, n: int) -> np.ndarray:
        lv = self.levels[i]
        if callable(lv):
            vals = np.asarray(lv(x), dtype=float)
            if vals.ndim == 1:
                vals = vals[:, None]
            return np.broadcast_to(vals, (x.size, n))
        arr = np.atleast_1d(np.asarray(lv, dtype=float))
        return np.broadcast_to(arr, (x.size, n))


@dataclass
class MarketSpec:
    """Market data: n stocks paying dividend h(B_T), an exogenous demand, and
    the dealer's risk aversion a > 0."""

    n: int
    dividend: object  # callable x -> (nx,) or (nx, n)
    demand: object  # GridFunction, SimpleDemand, constant, or callable(t, x)
    a: float
    grids: Grids

    def __post_init__(self):
        if self.a <= 0:
            raise GridError(f"risk aversion must be positive, got {self.a}")

    def dividend_values(self) -> np.ndarray:
        x = self.grids.space.nodes()
        vals = np.asarray(self.dividend(x), dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        if vals.shape != (self.grids.space.nx, self.n):
            raise GridError(f"dividend slice has shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise GridError("dividend is non-finite on the grid")
        return vals

    def demand_grid(self) -> GridFunction:
        d = self.demand
        if isinstance(d, GridFunction):
            if d.m != self.n:
                raise GridError(f"demand has {d.m} components, expected {self.n}")
            return d
        g = self.grids
        x = g.space.nodes()
        out = np.empty(g.shape(self.n))
        if isinstance(d, SimpleDemand):
            if abs(d.breakpoints[-1] - g.time.horizon) > 1e-12:
                raise GridError("last breakpoint must equal the horizon")
            for i, t in enumerate(g.time.times()):
                out[i] = d.level_values(d.period_of(t), x, self.n)
        elif callable(d):
            for i, t in enumerate(g.time.times()):
                vals = np.asarray(d(t, x), dtype=float)
                if vals.ndim == 1:
                    vals = vals[:, None]
                out[i] = np.broadcast_to(vals, (g.space.nx, self.n))
        else:
            out[:] = np.atleast_1d(np.asarray(d, dtype=float))
        return GridFunction(g, out)

    def demand_sup_norm(self) -> float:
        vals = self.demand_grid().values
        return float(np.sqrt((vals**2).sum(axis=-1)).max())

    def with_scaled(self, demand_factor=1.0, aversion_factor=1.0, dividend_factor=1.0):
        base_dividend = self.dividend
        if dividend_factor != 1.0:
            dividend = lambda x: dividend_factor * np.asarray(base_dividend(x), dtype=float)
        else:
            dividend = base_dividend
        demand = self.demand_grid() * demand_factor if demand_factor != 1.0 else self.demand
        return MarketSpec(
            n=self.n,
            dividend=dividend,
            demand=demand,
            a=self.a * aversion_factor,
            grids=self.grids,
        )


def build_impact_driver(demand: GridFunction, theta: float | None = None) -> BilinearDriver:
    """Bilinear driver of the (n+1)-dimensional equilibrium system.

    The first component carries the certainty-equivalent equation and the
    remaining n the price equations, with w = demand(t, x) frozen into the
    coefficient tensor node by node.
    """
    g = demand.grids
    n = demand.m
    dim = n + 1
    w = demand.values  # (nt+1, nx, n)
    c = np.zeros((g.time.nt + 1, g.space.nx, dim, dim, dim))
    c[..., 0, 0, 0] = -0.5
    c[..., 0, 1:, 1:] += 0.5 * w[..., :, None] * w[..., None, :]
    for i in range(n):
        c[..., 1 + i, 1 + i, 0] += -0.5
        c[..., 1 + i, 0, 1 + i] += -0.5
        c[..., 1 + i, 1 + i, 1:] += -0.5 * w
        c[..., 1 + i, 1:, 1 + i] += -0.5 * w
    return BilinearDriver(c, grids=g, theta=theta)


def check_viability_bound(market: MarketSpec, constants: BmoConstants | None = None) -> dict:
    """Sufficient-condition check a ||gamma||_inf ||Psi - E Psi||_bmo <= c.

    The threshold defaults to 1/(8 kappa Theta) with Theta certified for the
    demand normalized to unit sup norm; a positive margin is sufficient for
    the local solve, never necessary.
    """
    gamma_sup = market.demand_sup_norm()
    l_norm = terminal_bmo_norm(market.dividend, market.grids)
    product = market.a * gamma_sup * l_norm
    if constants is None:
        demand = market.demand_grid()
        normalized = demand * (1.0 / gamma_sup) if gamma_sup > 0 else demand
        theta = build_impact_driver(normalized).theta
        constants = BmoConstants(theta=theta)
    threshold = 1.0 / (8.0 * constants.kappa * constants.theta)
    return {
        "product": product,
        "threshold": threshold,
        "margin": threshold - product,
        "viable": product <= threshold,
        "gamma_sup": gamma_sup,
        "dividend_bmo": l_norm,
        "theta_normalized": constants.theta,
        "sufficient_only": True,
    }


@dataclass
class PriceSystem:
    """Equilibrium output: prices and their local characteristics on the grid."""

    S: GridFunction
    sigma: GridFunction
    alpha: GridFunction
    R: GridFunction
    eta: GridFunction
    theta: GridFunction
    Z: dict = field(default_factory=dict)
    solution: Solution | None = None
    market: MarketSpec | None = None

    def recovery_gaps(self) -> tuple[float, float]:
        """Defects of alpha = eta + theta^*gamma and a sigma = theta."""
        gamma = self.market.demand_grid().values
        recomputed = self.eta.values[..., 0] + np.einsum(
            "txn,txn->tx", self.theta.values, gamma
        )
        g1 = float(np.abs(self.alpha.values[..., 0] - recomputed).max())
        g2 = float(np.abs(self.market.a * self.sigma.values - self.theta.values).max())
        return g1, g2


def _grid_density_normalization(alpha: GridFunction) -> float:
    """E[Z_T] for the discrete stochastic exponential, by a tilted sweep."""
    g = alpha.grids
    op = heat_operator(g.space, g.time.dt)
    v = np.ones(g.space.nx)
    for i in range(g.time.nt - 1, -1, -1):
        v = op.apply_tilted(v, alpha.values[i, :, 0])
    return float(v[g.space.origin_index])


def _pricing_measure_drift_stats(ps: PriceSystem, paths) -> dict:
    """95%-confidence drift checks of Z S and Z (gamma . S) along paths."""
    g = ps.S.grids
    dt = g.time.dt
    gamma = ps.market.demand_grid()
    stats = {}
    zs_means, zg_means = [], []
    for _, pos in paths.blocks():
        npz = pos.shape[0]
        z = np.ones(npz)
        gain = np.zeros(npz)
        s_prev = interp_slice(ps.S.values[0], g.space, pos[:, 0])
        for i in range(g.time.nt):
            al = interp_slice(ps.alpha.values[i], g.space, pos[:, i])[..., 0]
            db = pos[:, i + 1] - pos[:, i]
            z *= np.exp(-al * db - 0.5 * al**2 * dt)
            s_next = interp_slice(ps.S.values[i + 1], g.space, pos[:, i + 1])
            gam = interp_slice(gamma.values[i], g.space, pos[:, i])
            gain += np.sum(gam * (s_next - s_prev), axis=-1)
            s_prev = s_next
        zs_means.append(z[:, None] * s_prev)
        zg_means.append(z * gain)
    zs = np.vstack(zs_means)
    zg = np.concatenate(zg_means)
    s0 = ps.S.at_origin()[0]
    for name, sample, target in (
        ("ZS", zs[:, 0], float(s0[0])),
        ("Z_gain", zg, 0.0),
    ):
        se = float(sample.std(ddof=1) / math.sqrt(sample.size))
        tstat = (float(sample.mean()) - target) / se if se > 0 else 0.0
        stats[name] = {"mean": float(sample.mean()), "target": target, "stderr": se,
                       "tstat": tstat, "pass95": abs(tstat) <= 1.96}
    return stats


def solve_prices(
    market: MarketSpec,
    tol: float = 1e-10,
    maxit: int = 200,
    paths=None,
) -> PriceSystem:
    """Solve the equilibrium system and recover (S, sigma, alpha, R, eta, theta).

    Warns when the sufficient viability margin is negative but still attempts
    the solve; raises :class:`PriceSolveError` on Picard divergence, naming
    the smallness product.  ``paths`` enables the pathwise pricing-measure
    drift diagnostics stored under ``Z``.
    """
    g = market.grids
    demand = market.demand_grid()
    driver = build_impact_driver(demand)
    viability = check_viability_bound(market)
    if not viability["viable"]:
        warnings.warn(
            f"viability product {viability['product']:.4g} exceeds the sufficient "
            f"threshold {viability['threshold']:.4g}; attempting the solve anyway",
            stacklevel=2,
        )
    div = market.dividend_values()
    terminal = lambda x: np.hstack([np.zeros((x.size, 1)), div])
    spec = BSDESpec(n=market.n + 1, driver=driver, terminal=terminal, grids=g)
    sol = picard_solve(spec, market.a, tol=tol, maxit=maxit)
    if not sol.converged:
        raise PriceSolveError(
            f"equilibrium Picard iteration diverged: smallness product "
            f"a*||gamma||*||Psi - E Psi||_bmo = {viability['product']:.4g} vs "
            f"threshold {viability['threshold']:.4g}; iterate history {sol.history[-3:]}"
        )
    inv_a = 1.0 / market.a
    eta = GridFunction(g, sol.zeta.values[..., :1], check=False)
    theta = GridFunction(g, sol.zeta.values[..., 1:], check=False)
    alpha_vals = eta.values[..., 0] + np.einsum("txn,txn->tx", theta.values, demand.values)
    ps = PriceSystem(
        S=GridFunction(g, sol.Y.values[..., 1:] * inv_a, check=False),
        sigma=GridFunction(g, theta.values * inv_a, check=False),
        alpha=GridFunction(g, alpha_vals[..., None], check=False),
        R=GridFunction(g, sol.Y.values[..., :1] * inv_a, check=False),
        eta=eta,
        theta=theta,
        solution=sol,
        market=market,
    )
    ps.Z["normalization"] = _grid_density_normalization(ps.alpha)
    ps.Z["viability"] = viability
    if paths is not None:
        ps.Z["drift"] = _pricing_measure_drift_stats(ps, paths)
    return ps


def simple_demand_oracle(market: MarketSpec) -> PriceSystem:
    """Backward-induction prices for a simple demand with constant levels.

    Within each period the price is the exponential tilt of the period-end
    price; the conditional normalizers of later periods are carried across
    breakpoints so that the full pricing measure of the viability definition
    is used (two periods with equal levels collapse exactly to one, by the
    tower property).
    """
    demand = market.demand
    if not isinstance(demand, SimpleDemand):
        raise GridError("simple_demand_oracle requires a SimpleDemand")
    if not demand.has_constant_levels():
        raise GridError(
            "backward induction needs per-period constant levels; state-dependent "
            "levels are only supported through the BSDE solver"
        )
    g = market.grids
    a = market.a
    T = g.time.horizon
    div = market.dividend_values()
    # dividends must have exponential moments for every tilt in play
    for lv in demand.levels:
        theta_vec = np.atleast_1d(np.asarray(lv, dtype=float))
        probe = quad_expect(
            lambda y: np.exp(
                -a * np.asarray(market.dividend(y), dtype=float).reshape(y.size, -1)
                @ theta_vec
            ),
            0.0,
            T,
            nodes=96,
        )
        if not math.isfinite(probe):
            raise GridError(
                f"dividend lacks the exponential moment for tilt level {theta_vec}"
            )

    op = heat_operator(g.space, g.time.dt)
    times = g.time.times()
    nt = g.time.nt
    bp = np.asarray(demand.breakpoints, dtype=float)
    idx = [int(round(b / g.time.dt)) for b in bp]
    if any(abs(times[j] - b) > 1e-10 for j, b in zip(idx, bp)):
        raise GridError("breakpoints must lie on the time grid")

    S = np.empty(g.shape(market.n))
    Nlog = np.empty((nt + 1, g.space.nx))
    S[nt] = div
    carry_p = div.copy()  # E_.[Psi * exp(-a int gamma dS)] modulo within-period tilts
    carry_n = np.ones(g.space.nx)
    for per in range(demand.nperiods - 1, -1, -1):
        theta_vec = np.atleast_1d(np.asarray(demand.levels[per], dtype=float))
        j_lo, j_hi = idx[per], idx[per + 1]
        tilt = np.exp(-a * S[j_hi] @ theta_vec)
        p_arr = tilt[:, None] * carry_p
        n_arr = tilt * carry_n
        for j in range(j_hi - 1, j_lo - 1, -1):
            p_arr = op.apply(p_arr)
            n_arr = op.apply(n_arr)
            S[j] = p_arr / n_arr[:, None]
            Nlog[j] = np.log(n_arr) + a * S[j] @ theta_vec
        if per > 0:
            rebase = np.exp(a * S[j_lo] @ theta_vec)
            carry_p = p_arr * rebase[:, None]
            carry_n = n_arr * rebase
    Nlog[nt] = 0.0

    S_gf = GridFunction(g, S)
    sigma = gradient_x(S_gf)
    gamma = market.demand_grid()
    R = GridFunction(g, -Nlog[..., None] / a, check=False)
    grad_logn = gradient_x(GridFunction(g, Nlog[..., None], check=False))
    alpha_vals = (
        a * np.einsum("txn,txn->tx", gamma.values, sigma.values) - grad_logn.values[..., 0]
    )
    alpha = GridFunction(g, alpha_vals[..., None], check=False)
    theta = GridFunction(g, a * sigma.values, check=False)
    eta = GridFunction(
        g,
        (alpha_vals - np.einsum("txn,txn->tx", theta.values, gamma.values))[..., None],
        check=False,
    )
    return PriceSystem(
        S=S_gf, sigma=sigma, alpha=alpha, R=R, eta=eta, theta=theta, market=market
    )


def demand_stability(markets, limit_market: MarketSpec, p: float, paths, tol=1e-10):
    """Convergence table for a family of demands against a limit demand.

    Each row reports the demand L1(dt x dP) distance and the combined price
    distance ||S^m - S||_{S^p} + ||sigma^m - sigma||_{H^p} +
    ||alpha^m - alpha||_{H^p}, all over a shared path bundle.
    """
    ref = solve_prices(limit_market, tol=tol)
    gamma_ref = limit_market.demand_grid()
    rows = []
    for m_index, market in enumerate(markets):
        row = {"index": m_index}
        try:
            ps = solve_prices(market, tol=tol)
        except PriceSolveError as exc:
            row.update({"diverged": True, "error": str(exc)})
            rows.append(row)
            continue
        d_sigma = ps.sigma - ref.sigma
        d_alpha = ps.alpha - ref.alpha
        dS = ps.S - ref.S
        # S^p pieces of Delta S: martingale integrand Delta sigma, drift
        # density Delta(sigma alpha)
        drift = ps.sigma.values * ps.alpha.values - ref.sigma.values * ref.alpha.values
        dS0 = float(np.linalg.norm(dS.at_origin()[0]))
        sp = (
            dS0
            + hp_norm(d_sigma, p, paths)
            + fv_norm(GridFunction(ps.S.grids, drift, check=False), p, paths)
        )
        d_gamma = market.demand_grid() - gamma_ref
        mag = GridFunction(
            d_gamma.grids,
            np.sqrt(np.sum(d_gamma.values**2, axis=-1, keepdims=True)),
            check=False,
        )
        l1 = fv_norm(mag, 1.0, paths)
        row.update(
            {
                "diverged": False,
                "demand_l1": l1,
                "sp_price": sp,
                "hp_sigma": hp_norm(d_sigma, p, paths),
                "hp_alpha": hp_norm(d_alpha, p, paths),
            }
        )
        row["combined"] = row["sp_price"] + row["hp_sigma"] + row["hp_alpha"]
        rows.append(row)
    return rows


@dataclass
class ImpactSeries:
    """Small-risk-aversion expansion: integrand and price coefficients."""

    order: int
    zeta_coeffs: list  # (n+1)-component GridFunctions, k = 1..K
    s_coeffs: list  # price coefficients S^(k), k = 1..K
    s0: GridFunction
    sigma0: GridFunction
    market: MarketSpec
    rho: float

    def evaluate(self, a: float):
        """Partial sums of the S, sigma, and alpha series at aversion ``a``."""
        g = self.s0.grids
        n = self.market.n
        gamma = self.market.demand_grid().values
        S = self.s0.copy()
        for k, sk in enumerate(self.s_coeffs, start=1):
            S = S + sk * a**k
        sigma = GridFunction.zeros(g, n)
        alpha = GridFunction.zeros(g, 1)
        for k, zk in enumerate(self.zeta_coeffs, start=1):
            z1 = zk.values[..., :1]
            z2 = zk.values[..., 1:]
            sigma = sigma + GridFunction(g, z2, check=False) * a ** (k - 1)
            contrib = z1[..., 0] + np.einsum("txn,txn->tx", z2, gamma)
            alpha = alpha + GridFunction(g, contrib[..., None], check=False) * a**k
        return {"S": S, "sigma": sigma, "alpha": alpha}


def impact_expansion(market: MarketSpec, order: int) -> ImpactSeries:
    """Power-series coefficients of prices and local characteristics in ``a``.

    The integrand coefficients are the expansion of the (n+1)-dimensional
    system with terminal (0, Psi): zeta^(1) = (0, sigma(0)) and the higher
    orders are convolution sums of the bilinear image; price coefficients are
    S^(k) = -sum_{l+m=k+1} E_t[int_t^T zeta_2^(l) (zeta_1^(m) +
    zeta_2^(m)* gamma) ds].
    """
    if order < 1:
        raise ValueError(f"expansion order must be >= 1, got {order}")
    g = market.grids
    demand = market.demand_grid()
    driver = build_impact_driver(demand)
    div = market.dividend_values()
    terminal = lambda x: np.hstack([np.zeros((x.size, 1)), div])
    spec = BSDESpec(n=market.n + 1, driver=driver, terminal=terminal, grids=g)
    series = expansion(spec, order)
    viability = check_viability_bound(market)
    rho = (
        viability["threshold"] / (viability["gamma_sup"] * viability["dividend_bmo"])
        if viability["gamma_sup"] * viability["dividend_bmo"] > 0
        else math.inf
    )
    if market.a >= rho:
        warnings.warn(
            f"risk aversion a={market.a:.4g} is outside the heuristic expansion "
            f"radius rho={rho:.4g}",
            stacklevel=2,
        )
    s0 = backward_accumulate(None, div, g)
    sigma0 = gradient_x(s0)
    gamma = demand.values
    s_coeffs = []
    for k in range(1, order + 1):
        src = np.zeros(g.shape(market.n))
        for l in range(1, k + 1):
            m = k + 1 - l
            zl = series.zeta_coeffs[l - 1].values
            zm = series.zeta_coeffs[m - 1].values
            factor = zm[..., 0] + np.einsum("txn,txn->tx", zm[..., 1:], gamma)
            src += zl[..., 1:] * factor[..., None]
        sk = backward_accumulate(GridFunction(g, -src, check=False), 0.0, g)
        s_coeffs.append(sk)
    return ImpactSeries(
        order=order,
        zeta_coeffs=series.zeta_coeffs,
        s_coeffs=s_coeffs,
        s0=s0,
        sigma0=sigma0,
        market=market,
        rho=rho,
    )


def leading_term(market: MarketSpec) -> GridFunction:
    """Leading price-impact coefficient -E_t[int_t^T sigma(0) sigma(0)^* gamma ds]."""
    g = market.grids
    s0 = backward_accumulate(None, market.dividend_values(), g)
    sigma0 = gradient_x(s0).values
    gamma = market.demand_grid().values
    proj = np.einsum("txn,txn->tx", sigma0, gamma)
    src = GridFunction(g, -sigma0 * proj[..., None], check=False)
    return backward_accumulate(src, 0.0, g)


def homogeneity_report(market: MarketSpec, b: float, tol: float = 1e-10) -> dict:
    """Deviations in the six scaling identities for (S, alpha, sigma) under
    demand scaling b*gamma, aversion scaling b*a, and dividend scaling b*Psi."""
    if b <= 0:
        raise ValueError(f"scaling factor must be positive, got {b}")
    base = solve_prices(market, tol=tol)
    scaled_demand = solve_prices(market.with_scaled(demand_factor=b), tol=tol)
    scaled_aversion = solve_prices(market.with_scaled(aversion_factor=b), tol=tol)
    scaled_dividend = solve_prices(market.with_scaled(dividend_factor=b), tol=tol)
    core = market.grids.core_mask()

    def rel_gap(u: GridFunction, v: GridFunction) -> float:
        diff = np.abs((u - v).values[:, core, :]).max()
        scale = max(np.abs(v.values[:, core, :]).max(), 1e-300)
        return float(diff / scale)

    report = {
        "alpha_demand_vs_aversion": rel_gap(scaled_demand.alpha, scaled_aversion.alpha),
        "alpha_aversion_vs_dividend": rel_gap(scaled_aversion.alpha, scaled_dividend.alpha),
        "sigma_demand_vs_aversion": rel_gap(scaled_demand.sigma, scaled_aversion.sigma),
        "sigma_aversion_vs_dividend": rel_gap(
            scaled_aversion.sigma, scaled_dividend.sigma * (1.0 / b)
        ),
        "price_demand_vs_aversion": rel_gap(scaled_demand.S, scaled_aversion.S),
        "price_aversion_vs_dividend": rel_gap(
            scaled_aversion.S, scaled_dividend.S * (1.0 / b)
        ),
        "b": b,
        "base_alpha_sup": float(np.abs(base.alpha.values[:, core, :]).max()),
    }
    report["max_deviation"] = max(
        v for k, v in report.items() if k.endswith(("aversion", "dividend"))
    )
    return report
