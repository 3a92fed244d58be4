"""Bounded Nelder-Mead simplex minimizer.

Plain downhill simplex with the classic coefficients (reflection 1,
expansion 2, contraction 0.5, shrink 0.5).  Box constraints are enforced
by clipping every trial point to the bounds before evaluation, which is
sufficient for the coordinate boxes used elsewhere in this library.
Deterministic: no restarts, no randomness.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import InvalidStartError


@dataclass
class OptProblem:
    objective: Callable[[np.ndarray], float]
    x0: Sequence[float]
    lower: Sequence[float]
    upper: Sequence[float]
    xtol: float = 1e-8
    ftol: float = 1e-12
    max_evals: int = 2000

    def __post_init__(self):
        x0 = np.asarray(self.x0, dtype=float)
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if x0.shape != lo.shape or x0.shape != hi.shape:
            raise ValueError("x0 and bounds must have the same length")
        if not np.all(np.isfinite(lo)) or not np.all(np.isfinite(hi)):
            raise ValueError("bounds must be finite")
        if not np.all(lo < hi):
            raise ValueError("need lower < upper componentwise")
        if np.any(x0 < lo) or np.any(x0 > hi):
            raise ValueError("x0 must lie within the bounds")
        self.x0 = x0
        self.lower = lo
        self.upper = hi


class OptResult(NamedTuple):
    x: np.ndarray
    fun: float
    evals: int


def _initial_simplex(x0, lo, hi):
    n = x0.size
    pts = [x0.copy()]
    rng_span = hi - lo
    for i in range(n):
        step = 0.05 * abs(x0[i])
        if step <= 1e-12 * rng_span[i]:
            step = 0.00025 * rng_span[i]
        v = x0.copy()
        v[i] = min(hi[i], v[i] + step)
        if v[i] == x0[i]:  # started at the upper bound
            v[i] = max(lo[i], x0[i] - step)
        pts.append(v)
    return np.array(pts)


def minimize(prob: OptProblem) -> OptResult:
    """Run the simplex search; returns (x_star, f_star, evals)."""
    lo, hi = prob.lower, prob.upper
    clip = lambda x: np.minimum(hi, np.maximum(lo, x))

    evals = 0

    def f(x):
        nonlocal evals
        evals += 1
        return float(prob.objective(x))

    f0 = f(prob.x0)
    if not np.isfinite(f0):
        raise InvalidStartError(f"objective not finite at x0={prob.x0!r}: {f0}")

    sim = _initial_simplex(prob.x0, lo, hi)
    fs = np.array([f0] + [f(v) for v in sim[1:]])

    n = prob.x0.size
    while evals < prob.max_evals:
        order = np.argsort(fs, kind="stable")
        sim, fs = sim[order], fs[order]

        if (np.max(np.abs(fs[1:] - fs[0])) <= prob.ftol
                and np.max(np.abs(sim[1:] - sim[0])) <= prob.xtol):
            break

        centroid = sim[:-1].mean(axis=0)
        worst = sim[-1]
        xr = clip(centroid + (centroid - worst))
        fr = f(xr)

        if fr < fs[0]:
            xe = clip(centroid + 2.0 * (centroid - worst))
            fe = f(xe)
            if fe < fr:
                sim[-1], fs[-1] = xe, fe
            else:
                sim[-1], fs[-1] = xr, fr
        elif fr < fs[-2]:
            sim[-1], fs[-1] = xr, fr
        else:
            if fr < fs[-1]:
                xc = clip(centroid + 0.5 * (centroid - worst))
                fc = f(xc)
                if fc <= fr:
                    sim[-1], fs[-1] = xc, fc
                else:
                    sim, fs = _shrink(sim, fs, f)
            else:
                xcc = clip(centroid - 0.5 * (centroid - worst))
                fcc = f(xcc)
                if fcc < fs[-1]:
                    sim[-1], fs[-1] = xcc, fcc
                else:
                    sim, fs = _shrink(sim, fs, f)

    best = int(np.argmin(fs))
    return OptResult(sim[best].copy(), float(fs[best]), evals)


def _shrink(sim, fs, f):
    for i in range(1, len(sim)):
        sim[i] = sim[0] + 0.5 * (sim[i] - sim[0])
        fs[i] = f(sim[i])
    return sim, fs
