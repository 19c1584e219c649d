import numpy as np


def cole_hopf_field(grids, a, c=1.0, kind="square"):
    """Continuum solution (1/c) log E_t[exp(c a h(B_T))] for h = x or h = x^2."""
    x = grids.space.nodes()
    times = grids.time.times()
    T = grids.time.horizon
    out = np.empty((grids.time.nt + 1, grids.space.nx))
    for i, t in enumerate(times):
        tau = T - t
        if kind == "square":
            den = 1.0 - 2.0 * c * a * tau
            out[i] = (c * a * x**2 / den + 0.5 * np.log(1.0 / den)) / c
        else:
            out[i] = a * x + 0.5 * c * a**2 * tau
    return out
