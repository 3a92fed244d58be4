"""Relay excitation law, steady-cycle detection and the oscillation predictor.

The relay here is the phase-parameterized kind: a two-level switch whose
switching thresholds are fractions (given by ``beta``) of the most recent
error extrema.  For beta < 0 the output leads the error zero crossings, for
beta > 0 it lags, and beta = 0 degenerates to the classic relay that
switches exactly at the crossings.  The describing function of this relay,

    N(a0) = 4h / (pi*a0) * (sqrt(1 - beta^2) - j*beta),

has constant phase -asin(beta), so the harmonic-balance condition
N(a0) * G(j*w0) = -1 pins the excited oscillation at the frequency where
the plant phase equals -pi + asin(beta).  ``hb_predict`` solves that
condition analytically and serves as the independent oracle for the
simulated oscillations.

Switching semantics
-------------------
With thresholds b1 = -beta*e_min and b2 = beta*e_max, the two-branch law
partitions the error axis into a region that forces +h (e >= b1 and
e > -b2), a region that forces -h (e <= -b2 and e < b1), and a middle
band.  For beta > 0 the band is the classic hysteresis interval where the
previous output is held.  For beta < 0 the two branch conditions overlap
inside the band, so a pointwise reading is contradictory there; the
implemented resolution is switch-on-entry (the phase-lead behavior the
law is meant to produce): the output flips when the error reaches the
band boundary coming from the far side, tracked by an arming flag reset
at every switch.  The extrema feeding the thresholds are tracked live
within each half-plane excursion and retained across the opposite one,
so the switching level always follows the extremum just passed.
Everything starts at zero, so the first cycle behaves like a classic
relay.  An optional refractory interval after each switch suppresses
measurement-noise chatter at the switching lines (see MrftConfig).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NoCrossingError, NotSteadyError
from .process import ProcessParams, frequency_response, frequency_response_phase

# default omega search cap: ten times the angular sampling rate at 1 ms
OMEGA_CAP_DEFAULT = 10.0 * 2.0 * math.pi / 1e-3


@dataclass
class MrftConfig:
    """Relay parameters: phase parameter, amplitude, optional output offset.

    ``refractory_samples`` enforces a minimum number of samples between
    switches (0 disables it).  A switch carries no information until the
    plant's transport delay has elapsed, so a refractory interval well
    below the oscillation period suppresses measurement-noise chatter at
    the switching lines without touching the excited phase.
    """

    beta: float
    h: float
    u0_offset: float = 0.0
    refractory_samples: int = 0

    def __post_init__(self):
        if not (abs(self.beta) < 1.0):
            raise ValueError(f"|beta| must be < 1, got {self.beta}")
        if not (self.h > 0.0):
            raise ValueError(f"relay amplitude must be positive, got {self.h}")
        if self.refractory_samples < 0:
            raise ValueError("refractory_samples must be non-negative")


@dataclass
class MrftState:
    """Mutable relay state; create fresh (all zeros) before each run.

    e_max / e_min follow the extrema of the most recent error excursions:
    live within the current half-plane excursion, retained across the
    opposite one.  ``cooldown`` counts down the refractory samples left
    after a switch.
    """

    e_max: float = 0.0
    e_min: float = 0.0
    u_prev: float = 0.0  # signed relay part, in {+h, -h} after the first step
    armed: bool = False
    cooldown: int = 0
    e_prev: float = field(default=math.nan)


def mrft_step(state: MrftState, e: float, cfg: MrftConfig) -> float:
    """Advance the relay by one sample and return its output."""
    h = cfg.h
    first = math.isnan(state.e_prev)

    # live extrema: reset when the error re-enters a half-plane, track the
    # running extremum inside it, retain on the other side
    if e > 0.0:
        if first or state.e_prev <= 0.0:
            state.e_max = e
        elif e > state.e_max:
            state.e_max = e
    elif e < 0.0:
        if first or state.e_prev >= 0.0:
            state.e_min = e
        elif e < state.e_min:
            state.e_min = e

    b1 = -cfg.beta * state.e_min
    b2 = cfg.beta * state.e_max
    claims_plus = e >= b1
    claims_minus = e <= -b2

    arm_up = e < b1
    arm_down = e > -b2

    if state.u_prev == 0.0:  # first sample ever
        sign = 1.0 if claims_plus else -1.0
        prev_sign = sign  # no switch bookkeeping on the first sample
        state.armed = arm_down if sign > 0.0 else arm_up
    else:
        prev_sign = 1.0 if state.u_prev > 0.0 else -1.0
        if state.cooldown > 0:
            # refractory hold: the plant cannot have responded to the last
            # switch yet, so noise at the switching line is ignored
            state.cooldown -= 1
            sign = prev_sign
        elif claims_plus and not claims_minus:
            sign = 1.0
        elif claims_minus and not claims_plus:
            sign = -1.0
        elif claims_plus and claims_minus:
            # overlap band (beta < 0, or both thresholds zero): switch on
            # entry if armed from the far side, else hold
            sign = -prev_sign if state.armed else prev_sign
        else:
            sign = prev_sign  # classic hysteresis band (beta > 0): hold

    if sign != prev_sign:
        state.cooldown = cfg.refractory_samples
        state.armed = arm_down if sign > 0.0 else arm_up
    elif not state.armed:
        state.armed = arm_down if sign > 0.0 else arm_up

    state.e_prev = e
    state.u_prev = sign * h
    return sign * h + cfg.u0_offset


@dataclass
class Oscillation:
    """One steady relay cycle: amplitude, frequency and the raw samples."""

    a0: float
    omega0: float
    pv: np.ndarray
    u: np.ndarray
    dt: float
    steady: bool
    start_index: int = 0

    @property
    def period(self) -> float:
        return 2.0 * math.pi / self.omega0

    def fundamental_amplitude(self) -> float:
        """Amplitude of the first Fourier harmonic of the pv cycle.

        This is the quantity the describing-function balance predicts; for
        poorly filtered plants it can sit well below the half peak-to-peak
        value ``a0`` (a pure triangle wave gives a ratio of 8/pi^2).
        """
        n = len(self.pv)
        k = np.arange(n)
        c = np.sum(self.pv * np.exp(-2j * math.pi * k / n))
        return 2.0 * abs(c) / n

    def header_dict(self, beta: float | None = None, h: float | None = None) -> dict:
        d = {
            "a0": self.a0,
            "omega0": self.omega0,
            "dt": self.dt,
            "steady": self.steady,
            "n_samples": int(len(self.pv)),
        }
        if beta is not None:
            d["beta"] = beta
        if h is not None:
            d["h"] = h
        return d

    def save(self, csv_path, json_path=None, beta=None, h=None):
        """Write cycle samples to CSV, and an optional JSON header."""
        n = len(self.pv)
        t = np.arange(n) * self.dt
        with open(csv_path, "w") as fh:
            fh.write("t,pv,u\n")
            for ti, pvi, ui in zip(t, self.pv, self.u):
                fh.write(f"{float(ti)!r},{float(pvi)!r},{float(ui)!r}\n")
        if json_path is not None:
            with open(json_path, "w") as fh:
                json.dump(self.header_dict(beta, h), fh, indent=1)


def phase_of_beta(beta: float) -> float:
    """Oscillation phase (radians) excited by a given relay parameter."""
    if not (abs(beta) < 1.0):
        raise ValueError(f"|beta| must be < 1, got {beta}")
    return math.asin(beta)


def df_mrft(a0: float, h: float, beta: float) -> complex:
    """Describing function of the relay at oscillation amplitude a0."""
    if not (a0 > 0.0 and h > 0.0 and abs(beta) < 1.0):
        raise ValueError(f"need a0 > 0, h > 0, |beta| < 1: {(a0, h, beta)}")
    return (4.0 * h / (math.pi * a0)) * (math.sqrt(1.0 - beta * beta) - 1j * beta)


def hb_predict(
    p: ProcessParams,
    h: float,
    beta: float,
    omega_cap: float = OMEGA_CAP_DEFAULT,
) -> tuple[float, float]:
    """Predict (a0, omega0) of the excited oscillation by harmonic balance.

    Solves arg G(j*w) = -pi + asin(beta) by bisection on the analytic
    (strictly decreasing) phase, then inverts the balance for the
    amplitude: a0 = 4h/pi * |G(j*w0)|.

    Raises NoCrossingError if the phase never reaches the target below
    ``omega_cap``.
    """
    if not (abs(beta) < 1.0 and h > 0.0):
        raise ValueError(f"need |beta| < 1 and h > 0: {(beta, h)}")
    target = -math.pi + math.asin(beta)

    w_lo = 1e-12
    if frequency_response_phase(p, w_lo) <= target:
        w_lo = 1e-15  # pathologically fast plant; phase is still > target there

    w_hi = 1.0 / max(p.time_sum, 1e-12)
    while frequency_response_phase(p, w_hi) > target:
        w_hi *= 2.0
        if w_hi > omega_cap:
            raise NoCrossingError(
                f"phase of {p} stays above {math.degrees(target):.2f} deg "
                f"up to omega={omega_cap:g} rad/s"
            )

    for _ in range(200):
        mid = 0.5 * (w_lo + w_hi)
        if frequency_response_phase(p, mid) > target:
            w_lo = mid
        else:
            w_hi = mid
        if (w_hi - w_lo) <= 1e-9 * mid:
            break
    omega0 = 0.5 * (w_lo + w_hi)
    a0 = 4.0 * h / math.pi * abs(frequency_response(p, omega0))
    return a0, omega0


def _moving_average(x: np.ndarray, window: int) -> np.ndarray:
    if window <= 1:
        return x
    kernel = np.full(window, 1.0 / window)
    return np.convolve(x, kernel, mode="same")


def _interp_extremum(seg: np.ndarray, idx: int) -> float:
    """Parabolic refinement of a sampled extremum value."""
    if idx <= 0 or idx >= len(seg) - 1:
        return float(seg[idx])
    y0, y1, y2 = float(seg[idx - 1]), float(seg[idx]), float(seg[idx + 1])
    denom = y0 - 2.0 * y1 + y2
    if denom == 0.0:
        return y1
    return y1 - (y2 - y0) ** 2 / (8.0 * denom)


def _cycle_amplitude(seg: np.ndarray) -> float:
    hi = _interp_extremum(seg, int(np.argmax(seg)))
    lo = _interp_extremum(seg, int(np.argmin(seg)))
    return 0.5 * (hi - lo)


def _cycle_table(traj, min_period, smooth_window):
    """Switch indices and per-cycle period/amplitude estimates."""
    u = np.asarray(traj.u, dtype=float)
    pv = np.asarray(traj.pv, dtype=float)
    dt = float(traj.t[1] - traj.t[0])

    mid = 0.5 * (u.max() + u.min())
    s = u > mid
    raw_switch = np.flatnonzero(s[1:] & ~s[:-1]) + 1

    if min_period > 0.0 and len(raw_switch) > 1:
        min_gap = max(1, int(round(0.5 * min_period / dt)))
        kept = [raw_switch[0]]
        for idx in raw_switch[1:]:
            if idx - kept[-1] >= min_gap:
                kept.append(idx)
        switch = np.array(kept)
    else:
        switch = raw_switch

    pv_est = _moving_average(pv, smooth_window) if smooth_window > 1 else pv
    periods = np.diff(switch) * dt
    amps = np.array(
        [_cycle_amplitude(pv_est[a:b]) for a, b in zip(switch[:-1], switch[1:])]
    )
    return u, pv, dt, switch, periods, amps


def _close(x, y, rel_tol):
    return abs(x - y) <= rel_tol * max(abs(x), abs(y))


def _steady_tail(traj, rel_tol, min_period, smooth_window):
    """(table, last steady index, first index of the agreeing tail)."""
    u, pv, dt, switch, periods, amps = _cycle_table(traj, min_period,
                                                    smooth_window)
    n_cycles = len(switch) - 1
    if n_cycles < 3:
        raise NotSteadyError(
            f"need at least 3 full relay cycles, found {max(n_cycles, 0)}"
        )
    for i in range(n_cycles - 1, 0, -1):
        if _close(amps[i], amps[i - 1], rel_tol) \
                and _close(periods[i], periods[i - 1], rel_tol):
            j0 = i
            while j0 > 0 and _close(amps[j0], amps[j0 - 1], rel_tol) \
                    and _close(periods[j0], periods[j0 - 1], rel_tol):
                j0 -= 1
            return (u, pv, dt, switch, periods, amps), i, j0

    a, b = switch[-2], switch[-1]
    candidate = Oscillation(
        a0=float(amps[-1]),
        omega0=2.0 * math.pi / float(periods[-1]),
        pv=pv[a:b].copy(),
        u=u[a:b].copy(),
        dt=dt,
        steady=False,
        start_index=int(a),
    )
    raise NotSteadyError(
        f"no two consecutive cycles agree within {rel_tol:.3f} "
        f"({n_cycles} cycles seen)",
        oscillation=candidate,
    )


def detect_steady_cycle(
    traj,
    rel_tol: float = 0.02,
    min_period: float = 0.0,
    smooth_window: int = 0,
):
    """Extract the last steady oscillation cycle from a closed-loop trajectory.

    Cycles are delimited at positive-going switches of the relay output u.
    A cycle is steady when it agrees with its predecessor in amplitude and
    period to within ``rel_tol``; the amplitude and frequency estimates are
    averaged over the whole agreeing tail, so switch-time quantization
    enters them once rather than per cycle.  ``min_period`` debounces
    spurious switches closer than half that period (useful under heavy
    measurement noise); ``smooth_window`` (samples) smooths pv for the
    amplitude and steadiness estimates only -- the returned cycle samples
    are raw.

    Raises NotSteadyError when fewer than 3 full cycles exist or no
    consecutive pair agrees.
    """
    table, i, j0 = _steady_tail(traj, rel_tol, min_period, smooth_window)
    u, pv, dt, switch, periods, amps = table
    n_tail = i - j0 + 1
    period = float(switch[i + 1] - switch[j0]) * dt / n_tail
    a, b = switch[i], switch[i + 1]
    return Oscillation(
        a0=float(np.mean(amps[j0:i + 1])),
        omega0=2.0 * math.pi / period,
        pv=pv[a:b].copy(),
        u=u[a:b].copy(),
        dt=dt,
        steady=True,
        start_index=int(a),
    )


def detect_steady_cycles(
    traj,
    rel_tol: float = 0.02,
    min_period: float = 0.0,
    smooth_window: int = 0,
    max_cycles: int = 5,
):
    """Up to ``max_cycles`` consecutive cycles of the steady tail.

    Each returned Oscillation is one switch-delimited cycle, newest last,
    all sharing the tail-averaged amplitude and frequency estimates.
    Useful for ensemble identification over consecutive cycles.
    """
    table, i, j0 = _steady_tail(traj, rel_tol, min_period, smooth_window)
    u, pv, dt, switch, periods, amps = table
    n_tail = i - j0 + 1
    period = float(switch[i + 1] - switch[j0]) * dt / n_tail
    a0 = float(np.mean(amps[j0:i + 1]))
    omega0 = 2.0 * math.pi / period
    first = max(0, i - max_cycles + 1)
    out = []
    for k in range(first, i + 1):
        a, b = switch[k], switch[k + 1]
        out.append(Oscillation(
            a0=a0,
            omega0=omega0,
            pv=pv[a:b].copy(),
            u=u[a:b].copy(),
            dt=dt,
            steady=True,
            start_index=int(a),
        ))
    return out


def phase_of_beta(beta: float) -> float:
    """Oscillation phase (radians) excited by a given relay parameter."""
    if not (abs(beta) < 1.0):
        raise ValueError(f"|beta| must be < 1, got {beta}")
    return math.asin(beta)


def df_mrft(a0: float, h: float, beta: float) -> complex:
    """Describing function of the relay at oscillation amplitude a0."""
    if not (a0 > 0.0 and h > 0.0 and abs(beta) < 1.0):
        raise ValueError(f"need a0 > 0, h > 0, |beta| < 1: {(a0, h, beta)}")
    return (4.0 * h / (math.pi * a0)) * (math.sqrt(1.0 - beta * beta) - 1j * beta)


def hb_predict(
    p: ProcessParams,
    h: float,
    beta: float,
    omega_cap: float = OMEGA_CAP_DEFAULT,
) -> tuple[float, float]:
    """Predict (a0, omega0) of the excited oscillation by harmonic balance.

    Solves arg G(j*w) = -pi + asin(beta) by bisection on the analytic
    (strictly decreasing) phase, then inverts the balance for the
    amplitude: a0 = 4h/pi * |G(j*w0)|.

    Raises NoCrossingError if the phase never reaches the target below
    ``omega_cap``.
    """
    if not (abs(beta) < 1.0 and h > 0.0):
        raise ValueError(f"need |beta| < 1 and h > 0: {(beta, h)}")
    target = -math.pi + math.asin(beta)

    w_lo = 1e-12
    if frequency_response_phase(p, w_lo) <= target:
        w_lo = 1e-15  # pathologically fast plant; phase is still > target there

    w_hi = 1.0 / max(p.time_sum, 1e-12)
    while frequency_response_phase(p, w_hi) > target:
        w_hi *= 2.0
        if w_hi > omega_cap:
            raise NoCrossingError(
                f"phase of {p} stays above {math.degrees(target):.2f} deg "
                f"up to omega={omega_cap:g} rad/s"
            )

    for _ in range(200):
        mid = 0.5 * (w_lo + w_hi)
        if frequency_response_phase(p, mid) > target:
            w_lo = mid
        else:
            w_hi = mid
        if (w_hi - w_lo) <= 1e-9 * mid:
            break
    omega0 = 0.5 * (w_lo + w_hi)
    a0 = 4.0 * h / math.pi * abs(frequency_response(p, omega0))
    return a0, omega0


def _moving_average(x: np.ndarray, window: int) -> np.ndarray:
    if window <= 1:
        return x
    kernel = np.full(window, 1.0 / window)
    return np.convolve(x, kernel, mode="same")


def _interp_extremum(seg: np.ndarray, idx: int) -> float:
    """Parabolic refinement of a sampled extremum value."""
    if idx <= 0 or idx >= len(seg) - 1:
        return float(seg[idx])
    y0, y1, y2 = float(seg[idx - 1]), float(seg[idx]), float(seg[idx + 1])
    denom = y0 - 2.0 * y1 + y2
    if denom == 0.0:
        return y1
    return y1 - (y2 - y0) ** 2 / (8.0 * denom)


def _cycle_amplitude(seg: np.ndarray) -> float:
    hi = _interp_extremum(seg, int(np.argmax(seg)))
    lo = _interp_extremum(seg, int(np.argmin(seg)))
    return 0.5 * (hi - lo)


def detect_steady_cycle(
    traj,
    rel_tol: float = 0.02,
    min_period: float = 0.0,
    smooth_window: int = 0,
):
    """Extract the last steady oscillation cycle from a closed-loop trajectory.

    Cycles are delimited at positive-going switches of the relay output u.
    A cycle is steady when it agrees with its predecessor in amplitude and
    period to within ``rel_tol``.  ``min_period`` debounces spurious
    switches closer than half that period (useful under heavy measurement
    noise); ``smooth_window`` (samples) smooths pv for the amplitude and
    steadiness estimates only -- the returned cycle samples are raw.

    Raises NotSteadyError when fewer than 3 full cycles exist or no
    consecutive pair agrees.
    """
    u = np.asarray(traj.u, dtype=float)
    pv = np.asarray(traj.pv, dtype=float)
    dt = float(traj.t[1] - traj.t[0])

    mid = 0.5 * (u.max() + u.min())
    s = u > mid
    raw_switch = np.flatnonzero(s[1:] & ~s[:-1]) + 1

    if min_period > 0.0 and len(raw_switch) > 1:
        min_gap = max(1, int(round(0.5 * min_period / dt)))
        kept = [raw_switch[0]]
        for idx in raw_switch[1:]:
            if idx - kept[-1] >= min_gap:
                kept.append(idx)
        switch = np.array(kept)
    else:
        switch = raw_switch

    n_cycles = len(switch) - 1
    if n_cycles < 3:
        raise NotSteadyError(
            f"need at least 3 full relay cycles, found {max(n_cycles, 0)}"
        )

    pv_est = _moving_average(pv, smooth_window) if smooth_window > 1 else pv
    periods = np.diff(switch) * dt
    amps = np.array(
        [_cycle_amplitude(pv_est[a:b]) for a, b in zip(switch[:-1], switch[1:])]
    )

    def close(x, y):
        return abs(x - y) <= rel_tol * max(abs(x), abs(y))

    for i in range(n_cycles - 1, 0, -1):
        if close(amps[i], amps[i - 1]) and close(periods[i], periods[i - 1]):
            # average the estimates over the whole steady tail: switch-time
            # quantization then enters the period once, not per cycle
            j0 = i
            while j0 > 0 and close(amps[j0], amps[j0 - 1]) \
                    and close(periods[j0], periods[j0 - 1]):
                j0 -= 1
            n_tail = i - j0 + 1
            period = float(switch[i + 1] - switch[j0]) * dt / n_tail
            a, b = switch[i], switch[i + 1]
            return Oscillation(
                a0=float(np.mean(amps[j0:i + 1])),
                omega0=2.0 * math.pi / period,
                pv=pv[a:b].copy(),
                u=u[a:b].copy(),
                dt=dt,
                steady=True,
                start_index=int(a),
            )

    a, b = switch[-2], switch[-1]
    candidate = Oscillation(
        a0=float(amps[-1]),
        omega0=2.0 * math.pi / float(periods[-1]),
        pv=pv[a:b].copy(),
        u=u[a:b].copy(),
        dt=dt,
        steady=False,
        start_index=int(a),
    )
    raise NotSteadyError(
        f"no two consecutive cycles agree within {rel_tol:.3f} "
        f"({n_cycles} cycles seen)",
        oscillation=candidate,
    )


def detect_steady_cycles(
    traj,
    rel_tol: float = 0.02,
    min_period: float = 0.0,
    smooth_window: int = 0,
    max_cycles: int = 5,
):
    """The last steady cycle plus up to ``max_cycles - 1`` predecessors.

    Each returned Oscillation is one cycle of the steady tail (all sharing
    the tail-averaged amplitude and frequency estimates), newest last.
    Useful for ensemble identification over consecutive cycles.
    """
    last = detect_steady_cycle(traj, rel_tol, min_period, smooth_window)
    u = np.asarray(traj.u, dtype=float)
    pv = np.asarray(traj.pv, dtype=float)
    dt = float(traj.t[1] - traj.t[0])
    n_len = len(last.pv)
    out = [last]
    b = last.start_index
    while len(out) < max_cycles:
        a = b - n_len
        if a < 0:
            break
        seg_u = u[a:b]
        # predecessor must still look like one cycle of the same tail:
        # exactly one positive-going switch, at its start
        mid = 0.5 * (seg_u.max() + seg_u.min())
        s = seg_u > mid
        ups = np.flatnonzero(s[1:] & ~s[:-1]) + 1
        if len(ups) != 0:
            break
        if not s[0]:
            break
        out.append(
            Oscillation(
                a0=last.a0,
                omega0=last.omega0,
                pv=pv[a:b].copy(),
                u=seg_u.copy(),
                dt=dt,
                steady=True,
                start_index=int(a),
            )
        )
        b = a
    out.reverse()
    return out
