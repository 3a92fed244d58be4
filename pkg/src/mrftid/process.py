"""Integrating second-order-plus-delay process model.

The plant family handled by this library is

    G(s) = k_eq * exp(-tau*s) / (s * (t_prop*s + 1) * (t_body*s + 1))

parameterized by an equivalent gain, two time constants and a transport
delay.  The triple (t_prop, t_body, tau) lives in a box of admissible
values; a spherical re-parameterization of that triple separates the pure
time scale (radius) from the shape of the dynamics (two angles), which the
discretization machinery exploits.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateParameterError

# Default admissible box for (t_prop, t_body, tau), in seconds.
DEFAULT_P_MIN = (0.015, 0.2, 0.0005)
DEFAULT_P_MAX = (0.3, 2.0, 0.1)

CSV_HEADER = "k_eq,t_prop,t_body,tau"


@dataclass(frozen=True)
class ProcessParams:
    """Plant parameters: gain, propulsion lag, body lag, transport delay."""

    k_eq: float
    t_prop: float
    t_body: float
    tau: float

    def __post_init__(self):
        if not (self.k_eq > 0.0):
            raise ValueError(f"k_eq must be positive, got {self.k_eq}")
        if not (self.t_prop > 0.0 and self.t_body > 0.0):
            raise ValueError(
                f"time constants must be positive, got ({self.t_prop}, {self.t_body})"
            )
        if self.tau < 0.0:
            raise ValueError(f"transport delay must be non-negative, got {self.tau}")

    @property
    def triple(self) -> tuple[float, float, float]:
        """The (t_prop, t_body, tau) vector without the gain."""
        return (self.t_prop, self.t_body, self.tau)

    @property
    def time_sum(self) -> float:
        return self.t_prop + self.t_body + self.tau

    def to_dict(self) -> dict:
        return {
            "k_eq": self.k_eq,
            "t_prop": self.t_prop,
            "t_body": self.t_body,
            "tau": self.tau,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProcessParams":
        return cls(
            k_eq=float(d["k_eq"]),
            t_prop=float(d["t_prop"]),
            t_body=float(d["t_body"]),
            tau=float(d["tau"]),
        )

    def to_csv_row(self) -> str:
        return f"{self.k_eq!r},{self.t_prop!r},{self.t_body!r},{self.tau!r}"

    @classmethod
    def from_csv_row(cls, row: str) -> "ProcessParams":
        k, tp, tb, tau = (float(v) for v in row.strip().split(","))
        return cls(k, tp, tb, tau)


@dataclass(frozen=True)
class ParamBounds:
    """Componentwise box for the (t_prop, t_body, tau) triple."""

    p_min: tuple[float, float, float] = DEFAULT_P_MIN
    p_max: tuple[float, float, float] = DEFAULT_P_MAX

    def __post_init__(self):
        if len(self.p_min) != 3 or len(self.p_max) != 3:
            raise ValueError("bounds must be triples (t_prop, t_body, tau)")
        if not all(lo < hi for lo, hi in zip(self.p_min, self.p_max)):
            raise ValueError(f"need p_min < p_max componentwise: {self}")
        if self.p_min[0] <= 0 or self.p_min[1] <= 0 or self.p_min[2] < 0:
            raise ValueError(f"lower bounds out of domain: {self.p_min}")

    def contains(self, p: ProcessParams, rtol: float = 1e-9) -> bool:
        """Whether the process triple lies inside the box (with slack rtol)."""
        return all(
            lo * (1 - rtol) <= v <= hi * (1 + rtol)
            for v, lo, hi in zip(p.triple, self.p_min, self.p_max)
        )

    @property
    def r_surface(self) -> float:
        """Radius of the reference sphere: the norm of the lower corner."""
        return math.sqrt(sum(v * v for v in self.p_min))

    def to_dict(self) -> dict:
        return {"p_min": list(self.p_min), "p_max": list(self.p_max)}

    @classmethod
    def from_dict(cls, d: dict) -> "ParamBounds":
        return cls(tuple(float(v) for v in d["p_min"]),
                   tuple(float(v) for v in d["p_max"]))

    @classmethod
    def from_file(cls, path) -> "ParamBounds":
        """Load bounds from a JSON (or TOML, if stdlib support exists) file."""
        text = open(path, "rb").read()
        if str(path).endswith(".toml"):
            import tomllib

            return cls.from_dict(tomllib.loads(text.decode()))
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class SphericalParams:
    """Spherical form of the parameter triple.

    r is the radial time scale, theta the azimuth atan(t_body/t_prop),
    phi the polar angle acos(tau/r).
    """

    r: float
    theta: float
    phi: float

    def __post_init__(self):
        if not (self.r > 0.0):
            raise ValueError(f"radius must be positive, got {self.r}")
        if not (0.0 < self.theta < math.pi / 2):
            raise DegenerateParameterError(
                f"theta must lie strictly in (0, pi/2), got {self.theta}"
            )
        if not (0.0 < self.phi <= math.pi / 2):
            raise DegenerateParameterError(
                f"phi must lie in (0, pi/2], got {self.phi}"
            )


def to_spherical(p: ProcessParams) -> SphericalParams:
    """Map the (t_prop, t_body, tau) triple to spherical coordinates."""
    r = math.sqrt(p.t_prop**2 + p.t_body**2 + p.tau**2)
    theta = math.atan2(p.t_body, p.t_prop)
    phi = math.acos(min(1.0, p.tau / r))
    return SphericalParams(r=r, theta=theta, phi=phi)


def from_spherical(s: SphericalParams) -> ProcessParams:
    """Inverse of :func:`to_spherical`; the gain is normalized to 1.

    Raises DegenerateParameterError when the angles would produce a zero
    time constant (theta at 0 or pi/2, or phi at 0).
    """
    eps = 1e-12
    if s.phi <= eps or s.theta <= eps or s.theta >= math.pi / 2 - eps:
        raise DegenerateParameterError(
            f"angles map to a degenerate process: theta={s.theta}, phi={s.phi}"
        )
    sin_phi = math.sin(s.phi)
    t_prop = s.r * sin_phi * math.cos(s.theta)
    t_body = s.r * sin_phi * math.sin(s.theta)
    tau = s.r * math.cos(s.phi)
    if tau < 0.0:
        tau = 0.0
    return ProcessParams(k_eq=1.0, t_prop=t_prop, t_body=t_body, tau=tau)


def time_scale(p: ProcessParams, alpha: float) -> ProcessParams:
    """Return the plant G(alpha*s): triple scaled by alpha, gain by 1/alpha.

    Dividing the gain makes the scaled transfer function literally equal to
    G evaluated at alpha*s, so frequency responses satisfy
    G_scaled(j*w) == G(j*alpha*w) exactly.
    """
    if not (alpha > 0.0):
        raise ValueError(f"scale factor must be positive, got {alpha}")
    return ProcessParams(
        k_eq=p.k_eq / alpha,
        t_prop=p.t_prop * alpha,
        t_body=p.t_body * alpha,
        tau=p.tau * alpha,
    )


def frequency_response(p: ProcessParams, omega):
    """Complex response G(j*omega); omega may be a scalar or an array."""
    w = np.asarray(omega, dtype=float)
    if np.any(w <= 0.0):
        raise ValueError("omega must be positive")
    jw = 1j * w
    g = p.k_eq * np.exp(-jw * p.tau) / (jw * (jw * p.t_prop + 1) * (jw * p.t_body + 1))
    if np.isscalar(omega):
        return complex(g)
    return g


def frequency_response_phase(p: ProcessParams, omega):
    """Unwrapped phase of G(j*omega) in radians (analytic, no wrap-around).

    Strictly decreasing in omega, which the oscillation predictor relies on
    for bisection.
    """
    w = np.asarray(omega, dtype=float)
    if np.any(w <= 0.0):
        raise ValueError("omega must be positive")
    ph = -math.pi / 2 - np.arctan(w * p.t_prop) - np.arctan(w * p.t_body) - w * p.tau
    if np.isscalar(omega):
        return float(ph)
    return ph
