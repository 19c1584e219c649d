"""Stability experiments: both sides of the perturbation estimates for pairs
of quadratic BSDEs differing in terminal condition and driver.

The theory's constants exist but are unnamed, so reports carry the observed
LHS/RHS ratios and decay orders only; no absolute constant is ever asserted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bmo import fv_norm, hbmo_norm, hp_norm, terminal_bmo_norm
from .grids import GridError, GridFunction
from .numerics import backward_accumulate, quad_expect
from .qbsde import BSDESpec, picard_solve


def delta_bound(f_base, f_primed, z_samples, grids) -> GridFunction:
    """Pointwise envelope delta(t, x) >= |f - f'|(t, x, z) / |z|^2 over samples.

    ``z_samples`` is an (ns, n) array of nonzero probe points; the envelope is
    certified by sampling only.
    """
    z_samples = np.atleast_2d(np.asarray(z_samples, dtype=float))
    if z_samples.size == 0:
        raise ValueError("z_samples must be nonempty")
    norms = np.sqrt((z_samples**2).sum(axis=1))
    if np.any(norms == 0):
        raise ValueError("z_samples must exclude z = 0")
    envelope = np.zeros((grids.time.nt + 1, grids.space.nx, 1))
    for z, nz in zip(z_samples, norms):
        fb = f_base.eval_constant_z(z, grids).values
        fp = f_primed.eval_constant_z(z, grids).values
        gap = np.sqrt(((fb - fp) ** 2).sum(axis=-1, keepdims=True)) / nz**2
        np.maximum(envelope, gap, out=envelope)
    return GridFunction(grids, envelope, check=False)


def default_z_samples(n: int, nsamples: int = 64, seed: int = 77, scale: float = 2.0):
    rng = np.random.default_rng(seed)
    z = scale * rng.standard_normal((nsamples, n))
    bad = np.sqrt((z**2).sum(axis=1)) < 1e-8
    return z[~bad]


@dataclass
class PerturbationPair:
    """A base BSDE and a perturbed one sharing grids and dimension."""

    base: BSDESpec
    primed: BSDESpec
    p: float
    delta: GridFunction | None = None  # driver-distance envelope

    def __post_init__(self):
        if self.base.grids != self.primed.grids or self.base.n != self.primed.n:
            raise GridError("base and primed specs must share grids and dimension")
        if self.p <= 1:
            raise ValueError(f"p must be > 1, got {self.p}")
        if self.delta is None:
            zs = default_z_samples(self.base.n)
            self.delta = delta_bound(self.base.driver, self.primed.driver, zs, self.base.grids)
        if float(self.delta.values.min()) < 0:
            raise GridError("delta envelope must be nonnegative")

    def swapped(self) -> "PerturbationPair":
        return PerturbationPair(self.primed, self.base, self.p, self.delta)


@dataclass
class StabilityReport:
    """LHS norms, RHS ingredients, and their ratios for one perturbation pair."""

    lhs_hp: float = math.nan
    lhs_sp: float = math.nan
    lhs_hbmo: float = math.nan
    lhs_sbmo: float = math.nan
    rhs_terms: dict = field(default_factory=dict)
    ratios: dict = field(default_factory=dict)
    smallness: dict = field(default_factory=dict)
    diverged: bool = False
    p: float = 2.0

    def rows(self):
        out = [("lhs_hp", self.lhs_hp), ("lhs_sp", self.lhs_sp),
               ("lhs_hbmo", self.lhs_hbmo), ("lhs_sbmo", self.lhs_sbmo)]
        out += [(f"rhs_{k}", v) for k, v in sorted(self.rhs_terms.items())]
        out += [(f"ratio_{k}", v) for k, v in sorted(self.ratios.items())]
        out += [(f"smallness_{k}", v) for k, v in sorted(self.smallness.items())]
        return out


def compare(pair: PerturbationPair, a: float, paths, tol: float = 1e-11, maxit: int = 200) -> StabilityReport:
    """Solve both BSDEs at parameter ``a`` and evaluate every estimate side.

    L^p/S^p norms are estimated along the supplied path bundle; bmo-flavored
    norms from grid suprema.  A divergent solve flags the report and leaves
    the ratios empty.
    """
    grids = pair.base.grids
    sol = picard_solve(pair.base, a, tol=tol, maxit=maxit)
    sol_p = picard_solve(pair.primed, a, tol=tol, maxit=maxit)
    report = StabilityReport(p=pair.p)
    factors = [f for s in (sol, sol_p) for f in s.contraction_factors[-3:]]
    report.smallness = {
        "hbmo_zeta_sum": sol.hbmo_zeta + sol_p.hbmo_zeta,
        "max_contraction_factor": max(factors) if factors else math.nan,
        "contraction_flag": bool(factors and max(factors) > 0.9),
    }
    if not (sol.converged and sol_p.converged):
        report.diverged = True
        return report

    p = pair.p
    d_zeta = sol_p.zeta - sol.zeta
    d_y = sol_p.Y - sol.Y
    d_f = pair.primed.driver.source(sol_p.zeta) - pair.base.driver.source(sol.zeta)
    report.lhs_hp = hp_norm(d_zeta, p, paths)
    dy0 = float(np.linalg.norm(d_y.at_origin()[0]))
    report.lhs_sp = dy0 + hp_norm(d_zeta, p, paths) + fv_norm(d_f, p, paths)
    report.lhs_hbmo = hbmo_norm(d_zeta)
    df_mag = GridFunction(
        grids, np.sqrt((d_f.values**2).sum(axis=-1, keepdims=True)), check=False
    )
    report.lhs_sbmo = (
        dy0 + report.lhs_hbmo + float(backward_accumulate(df_mag, 0.0, grids).values.max())
    )

    # right-hand-side ingredients; terminal data carry the parameter a
    term = a * pair.base.terminal_values()
    term_p = a * pair.primed.terminal_values()
    d_term = term_p - term
    x = grids.space.nodes()
    mean_gap = np.array(
        [
            quad_expect(
                lambda y: np.interp(y, x, d_term[:, j]), 0.0, grids.time.horizon, nodes=96
            )
            for j in range(d_term.shape[1])
        ]
    )
    # L^p norms of Delta L_T (centered) and Delta Xi (raw) along paths
    dl_acc, dxi_acc = [], []
    for _, pos in paths.blocks():
        vals = np.stack(
            [np.interp(pos[:, -1], x, d_term[:, j]) for j in range(d_term.shape[1])],
            axis=-1,
        )
        dl_acc.append(np.sqrt(((vals - mean_gap) ** 2).sum(axis=-1)))
        dxi_acc.append(np.sqrt((vals**2).sum(axis=-1)))
    dl_lp = float(np.mean(np.concatenate(dl_acc) ** p) ** (1.0 / p))
    dxi_lp = float(np.mean(np.concatenate(dxi_acc) ** p) ** (1.0 / p))
    dl_bmo = terminal_bmo_norm(
        lambda y: np.stack([np.interp(y, x, d_term[:, j]) for j in range(d_term.shape[1])], axis=-1),
        grids,
    )
    sqrt_delta_zeta = GridFunction(
        grids, np.sqrt(pair.delta.values) * sol.zeta.values, check=False
    )
    report.rhs_terms = {
        "dL_lp": dl_lp,
        "dXi_lp": dxi_lp,
        "dL_bmo": dl_bmo,
        "sqrt_delta_zeta_h2p_sq": hp_norm(sqrt_delta_zeta, 2 * p, paths) ** 2,
        "sqrt_delta_zeta_hbmo_sq": hbmo_norm(sqrt_delta_zeta) ** 2,
        "mean_dXi_abs": float(np.linalg.norm(mean_gap)),
    }
    r = report.rhs_terms
    denoms = {
        "hp": r["dL_lp"] + r["sqrt_delta_zeta_h2p_sq"],
        "sp": r["dXi_lp"] + r["sqrt_delta_zeta_h2p_sq"],
        "hbmo": r["dL_bmo"] + r["sqrt_delta_zeta_hbmo_sq"],
        "sbmo": r["mean_dXi_abs"] + r["dL_bmo"] + r["sqrt_delta_zeta_hbmo_sq"],
    }
    lhs = {
        "hp": report.lhs_hp,
        "sp": report.lhs_sp,
        "hbmo": report.lhs_hbmo,
        "sbmo": report.lhs_sbmo,
    }
    report.ratios = {
        k: (lhs[k] / denoms[k] if denoms[k] > 0 else math.nan) for k in denoms
    }
    return report


def decay_study(pairs, a: float, paths, tol: float = 1e-11) -> dict:
    """Fit log(LHS) against log(RHS) across a perturbation family.

    Returns the per-member reports plus least-squares slopes for the
    integrand-difference and price-difference estimates; linear decay
    corresponds to slope 1.
    """
    if len(pairs) < 3:
        raise ValueError(f"a decay study needs at least 3 family members, got {len(pairs)}")
    reports = [compare(pair, a, paths, tol=tol) for pair in pairs]
    rows = []
    for rep in reports:
        if rep.diverged:
            rows.append({"diverged": True})
            continue
        rows.append(
            {
                "diverged": False,
                "lhs_hp": rep.lhs_hp,
                "lhs_sp": rep.lhs_sp,
                "rhs_hp": rep.rhs_terms["dL_lp"] + rep.rhs_terms["sqrt_delta_zeta_h2p_sq"],
                "rhs_sp": rep.rhs_terms["dXi_lp"] + rep.rhs_terms["sqrt_delta_zeta_h2p_sq"],
                "ratio_hp": rep.ratios["hp"],
            }
        )

    def fit(xkey, ykey):
        pts = [
            (math.log(row[xkey]), math.log(row[ykey]))
            for row in rows
            if not row["diverged"] and row[xkey] > 0 and row[ykey] > 0
        ]
        if len(pts) < 2:
            return math.nan
        xs, ys = zip(*pts)
        slope = np.polyfit(xs, ys, 1)[0]
        return float(slope)

    return {
        "rows": rows,
        "reports": reports,
        "slope_hp": fit("rhs_hp", "lhs_hp"),
        "slope_sp": fit("rhs_sp", "lhs_sp"),
    }
