"""Controller synthesis from relay oscillations.

The tuning rules map one measured oscillation cycle (amplitude a0 at
frequency w0) to PID gains through three dimensionless coefficients:

    kp = c1 * 4h / (pi * a0),   ti = c2 * 2*pi/w0,   td = c3 * 2*pi/w0.

Two constraints tie the coefficients to a phase-margin specification
phi_m.  The loop gain at the excited frequency is
|C(j w0)| * |G(j w0)| = c1*sqrt(1 + (2 pi c3 - 1/(2 pi c2))^2), so forcing

    c1 * sqrt(1 + (2*pi*c3 - 1/(2*pi*c2))^2) = 1

puts the gain crossover exactly at w0, and exciting the oscillation at

    beta = sin(phi_m + atan(1/(2*pi*c2) - 2*pi*c3))

places the plant phase there such that the realized margin equals phi_m.
A rule is therefore fully determined by (c2, c3) and the margin: the
design search runs over those coefficients, simulating the relay test and
the closed-loop step response for each candidate, and minimizing the
time-normalized integral of squared error (ISE).

Cross-application of a controller tuned for one process to another is
scored by the relative ISE deterioration ("joint cost"), the quantity the
whole discretization and classification machinery is built around.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import (
    ConstraintInfeasibleError,
    InfeasibleControllerError,
    NoCrossingError,
    NotSteadyError,
)
from .neldermead import OptProblem, minimize
from .process import ProcessParams, frequency_response, frequency_response_phase
from .relay import MrftConfig, Oscillation
from .simulate import PidController, RefSpec, SimConfig, run_mrft, simulate

# Derivative filter time constant as a fraction of td.  A heavy filter
# eats into the realized phase margin at the crossover (the loss is about
# atan(x) - atan(x/(1 + f^2 + x*f)) with x = 2*pi*c3, f = x/ratio); 200
# keeps the loss below ~0.6 degrees while still rolling the derivative off.
DERIV_FILTER_RATIO = 200.0

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class PidParams:
    """PID gains; ti = inf encodes a PD controller."""

    kp: float
    ti: float = math.inf
    td: float = 0.0
    derivative_filter: float = 0.0

    def __post_init__(self):
        if not (self.kp > 0.0):
            raise ValueError(f"kp must be positive, got {self.kp}")
        if not (self.ti > 0.0):
            raise ValueError(f"ti must be positive or inf, got {self.ti}")
        if self.td < 0.0 or self.derivative_filter < 0.0:
            raise ValueError("td and derivative_filter must be non-negative")

    def controller(self) -> PidController:
        return PidController(self.kp, self.ti, self.td, self.derivative_filter)

    def to_dict(self) -> dict:
        return {
            "kp": self.kp,
            "ti": None if math.isinf(self.ti) else self.ti,
            "td": self.td,
            "derivative_filter": self.derivative_filter,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PidParams":
        ti = d.get("ti")
        return cls(
            kp=float(d["kp"]),
            ti=math.inf if ti is None else float(ti),
            td=float(d.get("td", 0.0)),
            derivative_filter=float(d.get("derivative_filter", 0.0)),
        )


@dataclass(frozen=True)
class HomogeneousRule:
    """Dimensionless tuning coefficients plus the excitation phase parameter."""

    c1: float
    c2: float
    c3: float
    beta: float

    def __post_init__(self):
        if not (self.c1 > 0.0):
            raise ValueError(f"c1 must be positive, got {self.c1}")
        if not (self.c2 > 0.0):
            raise ValueError(f"c2 must be positive or inf, got {self.c2}")
        if self.c3 < 0.0:
            raise ValueError(f"c3 must be non-negative, got {self.c3}")
        if not (abs(self.beta) < 1.0):
            raise ValueError(f"|beta| must be < 1, got {self.beta}")

    def to_dict(self) -> dict:
        return {
            "c1": self.c1,
            "c2": None if math.isinf(self.c2) else self.c2,
            "c3": self.c3,
            "beta": self.beta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HomogeneousRule":
        c2 = d.get("c2")
        return cls(
            c1=float(d["c1"]),
            c2=math.inf if c2 is None else float(c2),
            c3=float(d["c3"]),
            beta=float(d["beta"]),
        )


@dataclass(frozen=True)
class IseScenario:
    """Unit-step tracking scenario behind the ISE index.

    ``dt=None`` resolves the step per process as time_sum/500, which keeps
    the relative time resolution (and hence the discretization error)
    identical across time-scaled copies of a plant -- the scaled loop is
    then exactly the base loop run at a scaled step, so scale-invariance
    properties hold to numerical precision.
    """

    horizon_factor: float = 30.0
    dt: float | None = None
    divergence_factor: float = 100.0
    ref_value: float = 1.0
    fractional_delay: bool = True

    def __post_init__(self):
        if self.horizon_factor < 20.0:
            raise ValueError("horizon factor must be at least 20")
        if self.dt is not None and not (self.dt > 0.0):
            raise ValueError("dt must be positive (or None for adaptive)")
        if not (self.divergence_factor > 0.0):
            raise ValueError("divergence factor must be positive")

    def resolve_dt(self, p: ProcessParams) -> float:
        if self.dt is not None:
            return self.dt
        return p.time_sum / 500.0

    def horizon(self, p: ProcessParams) -> float:
        return self.horizon_factor * p.time_sum


def ise_from_error(e: np.ndarray, t: np.ndarray) -> float:
    """Time-normalized integral of squared error by trapezoidal quadrature."""
    span = float(t[-1] - t[0])
    return float(np.trapezoid(np.asarray(e) ** 2, t) / span)


def ise(c: PidParams, p: ProcessParams, scen: IseScenario = IseScenario()) -> float:
    """Step-tracking ISE of the closed loop; +inf flags instability."""
    cfg = SimConfig(
        dt=scen.resolve_dt(p),
        horizon=scen.horizon(p),
        ref=RefSpec("step", scen.ref_value),
        fractional_delay=scen.fractional_delay,
    )
    traj = simulate(p, c.controller(), cfg)
    pv = traj.pv
    if not np.all(np.isfinite(pv)):
        return math.inf
    if np.max(np.abs(pv)) > scen.divergence_factor * abs(scen.ref_value):
        return math.inf
    e = scen.ref_value - pv
    n = len(e)
    # non-decaying error envelope over the trailing tenth of the horizon;
    # the floor keeps fully decayed responses (numerical residue) unflagged
    m1 = np.max(np.abs(e[int(0.90 * n):int(0.95 * n)]))
    m2 = np.max(np.abs(e[int(0.95 * n):]))
    if m2 > m1 and m2 > 1e-6 * abs(scen.ref_value):
        return math.inf
    return ise_from_error(e, traj.t)


def joint_cost(c_i: PidParams, g_j: ProcessParams, scen: IseScenario,
               j_self: float) -> float:
    """Relative ISE deterioration of applying c_i to g_j.

    ``j_self`` is the ISE of g_j's own optimal controller on g_j; the
    result is a fraction (0.10 means ten percent worse).  Unstable
    cross-application yields +inf.
    """
    if not (math.isfinite(j_self) and j_self > 0.0):
        raise ValueError(f"self cost must be finite and positive, got {j_self}")
    j_cross = ise(c_i, g_j, scen)
    if math.isinf(j_cross):
        return math.inf
    return (j_cross - j_self) / j_self


def joint_cost_sym(c_i, j_ii, g_i, c_j, j_jj, g_j, scen) -> float:
    """max(J_ij, J_ji): the symmetric adjacency criterion."""
    return max(joint_cost(c_i, g_j, scen, j_jj), joint_cost(c_j, g_i, scen, j_ii))


def pid_from_oscillation(rule: HomogeneousRule, osc: Oscillation,
                         h: float) -> PidParams:
    """Instantiate the rule on one measured steady cycle."""
    if not osc.steady:
        raise NotSteadyError("tuning requires a steady oscillation cycle")
    kp = rule.c1 * 4.0 * h / (math.pi * osc.a0)
    ti = rule.c2 * TWO_PI / osc.omega0 if math.isfinite(rule.c2) else math.inf
    td = rule.c3 * TWO_PI / osc.omega0
    return PidParams(
        kp=kp, ti=ti, td=td, derivative_filter=td / DERIV_FILTER_RATIO
    )


def beta_for_phase_margin(c2: float, c3: float, phi_m: float) -> float:
    """Excitation phase parameter that realizes margin phi_m for (c2, c3)."""
    arg = phi_m + math.atan(1.0 / (TWO_PI * c2) - TWO_PI * c3)
    if not (-math.pi / 2 < arg < math.pi / 2):
        raise ConstraintInfeasibleError(
            f"phase-margin constraint infeasible: sin argument {arg:.4f} rad"
        )
    return math.sin(arg)


def c1_for_unit_crossover(c2: float, c3: float) -> float:
    """The c1 that places the loop gain crossover at the excited frequency."""
    return 1.0 / math.sqrt(1.0 + (TWO_PI * c3 - 1.0 / (TWO_PI * c2)) ** 2)


def check_gain_constraint(c1: float, c2: float, c3: float) -> float:
    """Residual of the unit-crossover constraint; feasible rules give ~0."""
    return c1 * math.sqrt(1.0 + (TWO_PI * c3 - 1.0 / (TWO_PI * c2)) ** 2) - 1.0


def rule_from_coefficients(c2: float, c3: float, phi_m: float) -> HomogeneousRule:
    """Build the fully constrained rule for (c2, c3) at margin phi_m."""
    return HomogeneousRule(
        c1=c1_for_unit_crossover(c2, c3),
        c2=c2,
        c3=c3,
        beta=beta_for_phase_margin(c2, c3, phi_m),
    )


class DesignResult(NamedTuple):
    rule: HomogeneousRule
    pid: PidParams
    ise_value: float
    a0: float
    omega0: float


# process design cache: keyed by the full design inputs; safe because every
# entry is deterministic in its key
_design_cache: dict = {}


def clear_design_cache():
    _design_cache.clear()


def _design_key(p, phi_m, structure, scen, h):
    return (p.k_eq, p.t_prop, p.t_body, p.tau, phi_m, structure,
            scen.horizon_factor, scen.dt, scen.ref_value, h)


def evaluate_rule(p, rule, scen: IseScenario = IseScenario(), h: float = 1.0):
    """DesignResult for a fixed rule: relay test, gains, step-response ISE.

    The rule coefficients are scale-invariant, so applying a ray anchor's
    optimal rule to a time-scaled copy reproduces that copy's own optimal
    design exactly; the radial machinery relies on this.
    """
    val, pid, osc = _evaluate_rule(p, rule, scen, h, scen.resolve_dt(p))
    if not math.isfinite(val) or pid is None:
        raise InfeasibleControllerError(
            f"rule with beta={rule.beta:.3f} destabilizes {p}"
        )
    return DesignResult(rule, pid, val, osc.a0, osc.omega0)


def _evaluate_rule(p, rule, scen, h, dt):
    """Run the relay test at the rule's phase and score the closed loop."""
    try:
        _, osc = run_mrft(
            p, MrftConfig(beta=rule.beta, h=h), dt=dt, cycles=20.0, rel_tol=0.01,
            fractional_delay=scen.fractional_delay,
        )
    except (NotSteadyError, NoCrossingError):
        return math.inf, None, None
    pid = pid_from_oscillation(rule, osc, h)
    return ise(pid, p, scen), pid, osc


def optimize_controller(
    p: ProcessParams,
    phi_m: float,
    structure: str = "pd",
    scen: IseScenario = IseScenario(),
    h: float = 1.0,
    warm_start=None,
    use_cache: bool = True,
) -> DesignResult:
    """ISE-optimal phase-margin-constrained controller for one process.

    The decision variables are the rule coefficients (c3 for PD; c2 and
    c3 for PID); c1 and beta follow from the margin constraints.  Each
    candidate is scored by exciting the plant at the implied beta,
    instantiating the rule on the detected cycle and simulating the step
    response.  ``warm_start`` seeds the simplex (a c3 value for PD or a
    (c2, c3) pair for PID).
    """
    if structure not in ("pd", "pid"):
        raise ValueError(f"structure must be 'pd' or 'pid', got {structure}")
    key = _design_key(p, phi_m, structure, scen, h)
    if use_cache and key in _design_cache:
        return _design_cache[key]

    dt = scen.resolve_dt(p)
    evaluated: dict = {}

    def score(x):
        c3 = round(float(x[-1]), 10)
        c2 = float(x[0]) if structure == "pid" else math.inf
        key_x = (c2, c3)
        if key_x in evaluated:
            return evaluated[key_x][0]
        try:
            rule = rule_from_coefficients(c2, c3, phi_m)
        except (ConstraintInfeasibleError, ValueError):
            evaluated[key_x] = (math.inf, None, None, None)
            return math.inf
        val, pid, osc = _evaluate_rule(p, rule, scen, h, dt)
        evaluated[key_x] = (val, rule, pid, osc)
        return val

    if structure == "pd":
        lower, upper = [0.0], [3.0]
        # deterministic zoomed grid, then a simplex polish; the valley is
        # flat so the grid keeps the argmin stable across nearby processes
        if warm_start is not None:
            c3_center = float(np.atleast_1d(warm_start)[-1])
            if not math.isfinite(score([c3_center])):
                c3_center = None
        else:
            c3_center = None
        if c3_center is None:
            coarse = [0.05, 0.15, 0.3, 0.6, 0.9, 1.4, 2.0]
            vals = [score([c]) for c in coarse]
            pick = int(np.argmin(vals))
            if math.isinf(vals[pick]):
                raise InfeasibleControllerError(
                    f"no stabilizing rule found for {p} at any scanned c3"
                )
            c3_center = coarse[pick]
            spreads = (0.4, 0.12)
        else:
            spreads = (0.25,)
        for spread in spreads:
            grid = c3_center * np.linspace(1.0 - spread, 1.0 + spread, 7)
            vals = [score([max(0.0, min(3.0, c))]) for c in grid]
            if math.isfinite(min(vals)):
                c3_center = max(0.0, min(3.0, float(grid[int(np.argmin(vals))])))
        x0 = np.array([c3_center])
        max_evals = 15
        xtol = 1e-4
    else:
        lower, upper = [0.05, 0.0], [50.0, 3.0]
        x0 = (np.atleast_1d(np.asarray(warm_start, dtype=float))
              if warm_start is not None else np.array([2.0, 0.3]))
        max_evals = 120
        xtol = 1e-3

    x0 = np.minimum(upper, np.maximum(lower, x0))
    try:
        minimize(OptProblem(score, x0, lower, upper,
                            xtol=xtol, ftol=1e-12, max_evals=max_evals))
    except InfeasibleControllerError:
        raise
    except Exception:
        pass  # keep the candidates seen so far

    finite = {k: v for k, v in evaluated.items() if math.isfinite(v[0])}
    if not finite:
        raise InfeasibleControllerError(
            f"no feasible stable controller for {p} (phi_m={phi_m})"
        )
    ise_min = min(v[0] for v in finite.values())
    # canonical pick: the smallest c3 within 0.2% of the best score, which
    # keeps the selected coefficients stable across neighboring processes
    pick_key = min(
        (k for k, v in finite.items() if v[0] <= ise_min * 1.002),
        key=lambda k: (k[1], k[0]),
    )
    val, rule, pid, osc = finite[pick_key]
    result = DesignResult(rule, pid, val, osc.a0, osc.omega0)
    if use_cache:
        _design_cache[key] = result
    return result


def phase_margin(c: PidParams, p: ProcessParams) -> float:
    """Realized loop phase margin (radians) from the frequency responses."""

    def loop_gain_db(w):
        g = frequency_response(p, w)
        return math.log10(abs(g) * abs(_pid_response(c, w)))

    # bracket the last gain crossover on a log grid, then bisect
    grid = np.logspace(-3, 5, 800)
    vals = np.array([loop_gain_db(w) for w in grid])
    idx = np.flatnonzero(np.diff(np.sign(vals)) != 0)
    if len(idx) == 0:
        raise InfeasibleControllerError("loop gain never crosses unity")
    lo, hi = grid[idx[-1]], grid[idx[-1] + 1]
    for _ in range(80):
        mid = math.sqrt(lo * hi)
        if loop_gain_db(mid) > 0:
            lo = mid
        else:
            hi = mid
    wc = math.sqrt(lo * hi)
    total_phase = frequency_response_phase(p, wc) + cmath_phase(_pid_response(c, wc))
    return math.pi + total_phase


def _pid_response(c: PidParams, w: float) -> complex:
    r = 1.0 + 0.0j
    if math.isfinite(c.ti):
        r += 1.0 / (1j * w * c.ti)
    if c.td > 0.0:
        r += 1j * w * c.td / (1.0 + 1j * w * c.derivative_filter)
    return c.kp * r


def cmath_phase(z: complex) -> float:
    return math.atan2(z.imag, z.real)


def estimate_k_eq(osc: Oscillation, h: float, p_identified: ProcessParams) -> float:
    """Equivalent gain from the measured cycle and the identified lags.

    Inverts |G(j w0)| = pi*a0/(4h) for the gain, using the identified
    time constants for the lag magnitudes.
    """
    if not osc.steady:
        raise NotSteadyError("gain estimation requires a steady cycle")
    w0 = osc.omega0
    m1 = abs(1.0 + 1j * w0 * p_identified.t_prop)
    m2 = abs(1.0 + 1j * w0 * p_identified.t_body)
    return math.pi * osc.a0 * w0 * m1 * m2 / (4.0 * h)


class PhaseSearchResult(NamedTuple):
    beta_d: float
    betas: np.ndarray
    ise_table: np.ndarray          # processes x betas
    best_beta_index: np.ndarray    # per process
    max_deterioration: dict        # candidate beta -> worst-case fraction


def find_distinguishing_phase(
    processes,
    phi_m: float,
    beta_grid,
    scen: IseScenario = IseScenario(),
    h: float = 1.0,
    full_output: bool = False,
):
    """Excitation phase whose rule deteriorates least across the family.

    For each grid phase the fully constrained PD rule is applied to every
    process (relay test + step response); each process's locally optimal
    phase is its grid minimizer.  Cross-applying a candidate rule to a
    process costs the relative ISE increase over that process's own
    optimum; the returned phase minimizes the worst case over the family.
    """
    processes = list(processes)
    if len(processes) < 1:
        raise ValueError("need at least one process")
    betas = np.asarray(list(beta_grid), dtype=float)
    if betas.size < 1:
        raise ValueError("need a non-empty beta grid")

    table = np.full((len(processes), betas.size), math.inf)
    for j, p in enumerate(processes):
        for b, beta in enumerate(betas):
            c3 = math.tan(phi_m - math.asin(beta)) / TWO_PI
            if c3 < 0.0:
                continue
            rule = rule_from_coefficients(math.inf, c3, phi_m)
            val, _, _ = _evaluate_rule(p, rule, scen, h, scen.resolve_dt(p))
            table[j, b] = val

    best_idx = np.argmin(table, axis=1)
    self_cost = table[np.arange(len(processes)), best_idx]
    if not np.all(np.isfinite(self_cost)):
        bad = [str(processes[j]) for j in np.flatnonzero(~np.isfinite(self_cost))]
        raise InfeasibleControllerError(
            f"no stabilizing grid phase for: {', '.join(bad)}"
        )

    worst: dict = {}
    for b in sorted(set(int(i) for i in best_idx)):
        det = (table[:, b] - self_cost) / self_cost
        worst[float(betas[b])] = float(np.max(det))
    finite = {k: v for k, v in worst.items() if math.isfinite(v)}
    if not finite:
        raise InfeasibleControllerError(
            "every candidate rule destabilizes some process in the family"
        )
    beta_d = min(finite, key=finite.get)
    if full_output:
        return beta_d, PhaseSearchResult(beta_d, betas, table, best_idx, worst)
    return beta_d
