"""Numerical laboratory for systems of quadratic BSDEs in a Brownian Markov
filtration: grid conditional-expectation calculus, BMO norms, the recursive
power-series expansion and Picard solver for local solutions, stability
experiments, a dealer price-impact model, and a first-exit Monte Carlo
counterexample.
"""

from .grids import GridError, GridFunction, Grids, SpaceGrid, TimeGrid
from .numerics import (
    PathBundle,
    backward_accumulate,
    gradient_x,
    heat_step,
    quad_expect,
    sample_paths,
)
from .bmo import (
    BmoConstants,
    NormReport,
    hbmo_norm,
    hp_norm,
    radius,
    semimartingale_norms,
    terminal_bmo_norm,
)
from .qbsde import (
    BSDESpec,
    BilinearDriver,
    ExpansionSeries,
    QuadraticDriver,
    Solution,
    bilinear_image,
    evaluate_series,
    expansion,
    lift_terminal,
    picard_solve,
    residual,
)

__version__ = "0.1.0"

__all__ = [
    "BSDESpec",
    "BilinearDriver",
    "BmoConstants",
    "ExpansionSeries",
    "GridError",
    "GridFunction",
    "Grids",
    "NormReport",
    "PathBundle",
    "QuadraticDriver",
    "Solution",
    "SpaceGrid",
    "TimeGrid",
    "backward_accumulate",
    "bilinear_image",
    "evaluate_series",
    "expansion",
    "gradient_x",
    "heat_step",
    "hbmo_norm",
    "hp_norm",
    "lift_terminal",
    "picard_solve",
    "quad_expect",
    "radius",
    "residual",
    "sample_paths",
    "semimartingale_norms",
    "terminal_bmo_norm",
    "__version__",
]
