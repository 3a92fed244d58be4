"""Joint-cost-driven discretization of the plant-parameter box.

Equispaced gridding of the (t_prop, t_body, tau) box would over-resolve
regions where neighboring plants behave alike.  Instead, the box is
discretized so that the optimal controllers of adjacent members deteriorate
by a fixed fraction j_star when swapped: a sweep over the two shape angles
of a reference sphere (radius = the norm of the lower corner) places
members at joint-cost spacing, and each sphere member is then replicated
along its ray by powers of a scale factor alpha chosen so that successive
time-scaled copies also sit at j_star.  Time scaling leaves the normalized
loop invariant, so one alpha per ray covers the whole radial extent, and
the members of neighboring rays stay at j_star spacing on every shell.

The result carries the full directed joint-cost matrix (the training-loss
weights derive from it), the per-class optimal controllers, and the list
of adjacent pairs for verification.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DiscretizationStepError, RadialFillError
from .neldermead import OptProblem, minimize
from .process import ParamBounds, ProcessParams, from_spherical, time_scale, to_spherical
from .relay import MrftConfig
from .simulate import run_mrft
from .tuning import (
    DesignResult,
    HomogeneousRule,
    IseScenario,
    PidParams,
    evaluate_rule,
    ise,
    joint_cost,
    optimize_controller,
    pid_from_oscillation,
)

J_CAP = 10.0  # fraction; caps unstable pairs in the loss-weight matrix

TOOL_VERSION = "0.1.0"


@dataclass
class DiscreteSet:
    processes: list
    surface_ids: list
    joint_costs: np.ndarray
    controllers: list  # DesignResult per class
    j_star: float
    phi_m: float
    bounds: ParamBounds
    adjacency: list = field(default_factory=list)  # (i, j, kind, j_sym)
    surface_sweep: list = field(default_factory=list)  # all sphere members
    sphere_pairs: list = field(default_factory=list)  # sweep-index pairs
    seed: int = 0

    def __len__(self):
        return len(self.processes)

    @property
    def lut(self) -> list:
        return [c.pid for c in self.controllers]

    def class_rule(self, idx: int) -> HomogeneousRule:
        return self.controllers[idx].rule


def angular_extent(bounds: ParamBounds):
    """(theta, phi) ranges covering every direction of the box."""
    tp0, tb0, tau0 = bounds.p_min
    tp1, tb1, tau1 = bounds.p_max
    theta_lo = math.atan2(tb0, tp1)
    theta_hi = math.atan2(tb1, tp0)
    phi_lo = math.acos(tau1 / math.sqrt(tp0**2 + tb0**2 + tau1**2))
    phi_hi = math.acos(tau0 / math.sqrt(tp1**2 + tb1**2 + tau0**2))
    return (theta_lo, theta_hi), (phi_lo, phi_hi)


def _on_sphere(r0, theta, phi) -> ProcessParams:
    from .process import SphericalParams

    return from_spherical(SphericalParams(r=r0, theta=theta, phi=phi))


def _design(p, phi_m, scen, h, warm=None):
    return optimize_controller(p, phi_m, scen=scen, h=h, warm_start=warm)


def _sym_cost(res_i, g_i, res_j, g_j, scen):
    return max(
        joint_cost(res_i.pid, g_j, scen, res_j.ise_value),
        joint_cost(res_j.pid, g_i, scen, res_i.ise_value),
    )


def adjacent_process(
    g_i: ProcessParams,
    direction: tuple,
    j_star: float,
    phi_m: float,
    scen: IseScenario = IseScenario(),
    h: float = 1.0,
    s_init: float = 0.1,
    tol: float = 0.01,
):
    """Next surface member along a (theta, phi) direction at cost j_star.

    Minimizes E(s) = (j_star - J_sym(candidate(s), g_i))^2 over the scalar
    angular step s.  Returns (process, step, j_sym).  Raises
    DiscretizationStepError when the achieved cost misses j_star by more
    than ``tol``.
    """
    s_i = to_spherical(g_i)
    dth, dph = direction
    norm = math.hypot(dth, dph)
    dth, dph = dth / norm, dph / norm
    res_i = _design(g_i, phi_m, scen, h)
    warm_c3 = res_i.rule.c3

    evaluated = {}

    def j_sym_at(s):
        s = float(s)
        if s in evaluated:
            return evaluated[s]
        try:
            cand = _on_sphere(s_i.r, s_i.theta + s * dth, s_i.phi + s * dph)
            res_c = _design(cand, phi_m, scen, h, warm=[warm_c3])
            val = _sym_cost(res_i, g_i, res_c, cand, scen)
        except Exception:
            val = math.inf
        evaluated[s] = (val, cand if math.isfinite(val) else None)
        return evaluated[s]

    def objective(x):
        val, _ = j_sym_at(x[0])
        if not math.isfinite(val):
            return 1e6
        return (j_star - val) ** 2

    s_star = _solve_scalar_cost(j_sym_at, objective, j_star, s_init,
                                lo=1e-5, hi=1.5)
    # the best point actually evaluated wins (the cost is noisy at the
    # per-candidate design-convergence level)
    s_best = min(
        (s for s, (v, c) in evaluated.items() if math.isfinite(v) and c is not None),
        key=lambda s: abs(evaluated[s][0] - j_star),
        default=s_star,
    )
    val, cand = j_sym_at(s_best)
    if not math.isfinite(val) or abs(val - j_star) > tol or cand is None:
        raise DiscretizationStepError(
            f"step search from ({math.degrees(s_i.theta):.2f}, "
            f"{math.degrees(s_i.phi):.2f}) deg reached J={val:.4f} "
            f"(target {j_star}) at step {s_best:.4f}"
        )
    return cand, s_best, val


def _solve_scalar_cost(j_at, objective, j_star, x, lo, hi):
    """Drive a monotone noisy scalar cost to j_star.

    Geometric bracketing, bisection on the bracket, then a simplex polish
    of the squared miss from the bisection point.
    """
    val, _ = j_at(x)
    x_lo = x_hi = None
    for _ in range(30):
        if math.isfinite(val) and val < j_star:
            x_lo = x
        elif math.isfinite(val):
            x_hi = x
        if x_lo is not None and x_hi is not None:
            break
        if not math.isfinite(val) or val > j_star:
            x = max(lo, lo + 0.55 * (x - lo))
        else:
            x = min(hi, lo + 1.8 * (x - lo))
        val, _ = j_at(x)
    if x_lo is not None and x_hi is not None:
        for _ in range(8):
            mid = 0.5 * (x_lo + x_hi)
            v, _ = j_at(mid)
            if math.isfinite(v) and v < j_star:
                x_lo = mid
            else:
                x_hi = mid
        x = 0.5 * (x_lo + x_hi)
    try:
        res = minimize(OptProblem(objective, [x], [lo], [hi],
                                  xtol=1e-6, ftol=1e-12, max_evals=10))
        return float(res.x[0])
    except Exception:
        return float(x)


def discretize_surface(
    bounds: ParamBounds,
    j_star: float,
    phi_m: float,
    scen: IseScenario = IseScenario(),
    h: float = 1.0,
    extent=None,
):
    """Sweep the reference sphere over the box's angular extent.

    Rows advance in +theta, members within a row in +phi, starting from
    the low corner of the extent; each march continues until the extent
    is covered (the last member may sit just beyond the edge).  A
    degenerate (zero-area) ``extent`` override yields the single corner
    member.  Returns (members, pairs) where pairs are index tuples of
    adjacent members with their achieved symmetric cost.
    """
    if extent is None:
        extent = angular_extent(bounds)
    (th_lo, th_hi), (ph_lo, ph_hi) = extent
    r0 = bounds.r_surface

    members = []
    pairs = []

    def march(start_idx, direction, hi, coord):
        """March from members[start_idx] along direction until hi covered."""
        idx_prev = start_idx
        s_warm = 0.1
        while True:
            g_prev = members[idx_prev]
            ang = getattr(to_spherical(g_prev), coord)
            if ang >= hi:
                break
            try:
                cand, s_warm, val = adjacent_process(
                    g_prev, direction, j_star, phi_m, scen, h, s_init=s_warm
                )
            except DiscretizationStepError as err:
                raise DiscretizationStepError(
                    f"while marching {coord} at index {idx_prev}: {err}"
                ) from err
            members.append(cand)
            pairs.append((idx_prev, len(members) - 1, val))
            idx_prev = len(members) - 1
        return idx_prev

    members.append(_on_sphere(r0, th_lo, ph_lo))
    # first row in +phi, then rows seeded by +theta steps
    march(0, (0.0, 1.0), ph_hi, "phi")
    row_seed = 0
    while to_spherical(members[row_seed]).theta < th_hi:
        try:
            seed, _, val = adjacent_process(
                members[row_seed], (1.0, 0.0), j_star, phi_m, scen, h
            )
        except DiscretizationStepError as err:
            raise DiscretizationStepError(
                f"while seeding the next theta row: {err}"
            ) from err
        members.append(seed)
        new_seed = len(members) - 1
        pairs.append((row_seed, new_seed, val))
        march(new_seed, (0.0, 1.0), ph_hi, "phi")
        row_seed = new_seed
    return members, pairs


def radial_alpha(
    g: ProcessParams,
    j_star: float,
    phi_m: float,
    scen: IseScenario = IseScenario(),
    h: float = 1.0,
    tol: float = 0.01,
) -> float:
    """Scale factor alpha > 1 with J_sym(G, G(alpha s)) = j_star.

    The rule coefficients are scale-invariant, so the scaled copy's
    controller is the anchor's rule applied to the scaled copy's own
    oscillation; the search is over alpha alone.
    """
    res = _design(g, phi_m, scen, h)
    rule = res.rule

    def controller_for(p):
        _, osc = run_mrft(p, MrftConfig(rule.beta, h),
                          dt=scen.resolve_dt(p), cycles=20.0, rel_tol=0.01,
                          fractional_delay=scen.fractional_delay)
        return pid_from_oscillation(rule, osc, h)

    evaluated = {}

    def j_sym_at(alpha):
        alpha = float(alpha)
        if alpha in evaluated:
            return evaluated[alpha], None
        p2 = time_scale(g, alpha)
        try:
            c2 = controller_for(p2)
            j22 = ise(c2, p2, scen)
            val = max(
                joint_cost(res.pid, p2, scen, j22),
                joint_cost(c2, g, scen, res.ise_value),
            )
        except Exception:
            val = math.inf
        evaluated[alpha] = val
        return val, None

    def objective(x):
        val, _ = j_sym_at(x[0])
        return 1e6 if not math.isfinite(val) else (j_star - val) ** 2

    _solve_scalar_cost(j_sym_at, objective, j_star, 1.3, lo=1.0 + 1e-6, hi=8.0)
    a_star = min(
        (a for a, v in evaluated.items() if math.isfinite(v)),
        key=lambda a: abs(evaluated[a] - j_star),
        default=None,
    )
    if a_star is None or abs(evaluated[a_star] - j_star) > tol:
        achieved = math.inf if a_star is None else evaluated[a_star]
        raise RadialFillError(
            f"alpha search for {g} reached J={achieved:.4f} (target {j_star})"
        )
    return a_star


def _ray_alpha_interval(g: ProcessParams, bounds: ParamBounds):
    """[alpha_lo, alpha_hi] for which time_scale(g, alpha) stays in the box."""
    lo = max(bmin / v for v, bmin in zip(g.triple, bounds.p_min))
    hi = min(bmax / v for v, bmax in zip(g.triple, bounds.p_max))
    return lo, hi


def radial_fill(
    surface: list,
    bounds: ParamBounds,
    j_star: float,
    phi_m: float,
    scen: IseScenario = IseScenario(),
    h: float = 1.0,
    surface_pairs=None,
) -> DiscreteSet:
    """Replicate sphere members along their rays and assemble the set."""
    processes = []
    surface_ids = []
    adjacency = []
    chain_info = []  # (surface_index, k) per process
    anchors = []     # surface anchor per process, for design warm starts
    index_of = {}
    ray_shells = {}  # surface_index -> set of in-box k

    for si, g in enumerate(surface):
        a_lo, a_hi = _ray_alpha_interval(g, bounds)
        if a_lo > a_hi:
            continue  # ray misses the box entirely
        alpha = radial_alpha(g, j_star, phi_m, scen, h)
        prev_idx = None
        k = 0
        while True:
            scale = alpha**k
            if scale > a_hi:
                break
            cand = time_scale(g, scale)
            if scale >= a_lo and bounds.contains(cand):
                processes.append(cand)
                idx = len(processes) - 1
                chain_info.append((si, k))
                anchors.append(g)
                index_of[(si, k)] = idx
                ray_shells.setdefault(si, set()).add(k)
                if k == 0:
                    surface_ids.append(idx)
                if prev_idx is not None and chain_info[prev_idx][1] == k - 1:
                    adjacency.append((prev_idx, idx, "radial", None))
                prev_idx = idx
            k += 1

    if not processes:
        raise RadialFillError("no ray of the surface intersects the box")

    # surface adjacency at the sphere itself: record class-index pairs when
    # both anchors are in the box, sphere-level (sweep-index) pairs always
    sphere_pairs = list(surface_pairs or [])
    for i, j, val in sphere_pairs:
        a = index_of.get((i, 0))
        b = index_of.get((j, 0))
        if a is not None and b is not None:
            adjacency.append((a, b, "surface", val))

    controllers = _build_controllers(processes, chain_info, anchors,
                                     phi_m, scen, h)
    costs = _joint_cost_matrix(processes, controllers, scen)

    # fill in the achieved costs for recorded pairs
    resolved = []
    for i, j, kind, val in adjacency:
        if val is None:
            val = max(costs[i, j], costs[j, i])
        resolved.append((i, j, kind, float(val)))

    return DiscreteSet(
        processes=processes,
        surface_ids=surface_ids,
        joint_costs=costs,
        controllers=controllers,
        j_star=j_star,
        phi_m=phi_m,
        bounds=bounds,
        adjacency=resolved,
        surface_sweep=list(surface),
        sphere_pairs=sphere_pairs,
    )


def _build_controllers(processes, chain_info, anchors, phi_m, scen, h):
    """Per-class designs.

    Ray anchors are optimized in full; shells inherit the anchor's rule
    applied to their own oscillation.  The design problem is exactly
    scale-invariant along a ray, so the anchor's optimal rule is each
    shell's optimal rule, and reusing it keeps the stored controllers
    identical to those the radial spacing search measured.
    """
    controllers = []
    for p, (si, k), anchor in zip(processes, chain_info, anchors):
        anchor_res = optimize_controller(anchor, phi_m, scen=scen, h=h)
        if k == 0:
            controllers.append(anchor_res)
        else:
            controllers.append(evaluate_rule(p, anchor_res.rule, scen, h))
    return controllers


def _joint_cost_matrix(processes, controllers, scen):
    n = len(processes)
    costs = np.zeros((n, n))
    for j, (g_j, res_j) in enumerate(zip(processes, controllers)):
        for i, res_i in enumerate(controllers):
            if i == j:
                continue
            costs[i, j] = joint_cost(res_i.pid, g_j, scen, res_j.ise_value)
    return costs


def build_gamma_matrix(d: DiscreteSet) -> np.ndarray:
    """Loss weights 1 + J_iT, with J as a clipped fraction.

    Negative convergence noise clips to zero (weights are at least 1) and
    unstable pairs cap at 1 + J_CAP so the exponentials in the modified
    softmax stay bounded.
    """
    j = np.clip(d.joint_costs, 0.0, J_CAP)
    j[~np.isfinite(d.joint_costs)] = J_CAP
    return 1.0 + j


def build_controller_lut(d: DiscreteSet) -> list:
    """Per-class controller table (already produced during assembly)."""
    return [
        {"class": i, "rule": c.rule.to_dict(), "pid": c.pid.to_dict(),
         "ise": c.ise_value}
        for i, c in enumerate(d.controllers)
    ]


def build(
    bounds: ParamBounds,
    j_star: float = 0.10,
    phi_m: float = math.radians(20.0),
    scen: IseScenario = IseScenario(),
    h: float = 1.0,
    seed: int = 0,
) -> DiscreteSet:
    """Full discretization: sphere sweep, radial fill, matrix, controllers."""
    surface, pairs = discretize_surface(bounds, j_star, phi_m, scen, h)
    d = radial_fill(surface, bounds, j_star, phi_m, scen, h,
                    surface_pairs=pairs)
    d.seed = seed
    return d


# ---------------------------------------------------------------------------
# persistence

def _write_matrix(path, m):
    with open(path, "w") as fh:
        for row in m:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def _read_matrix(path):
    return np.atleast_2d(np.genfromtxt(path, delimiter=","))


def _sha256(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def save_discrete_set(d: DiscreteSet, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    paths = {}

    paths["processes"] = os.path.join(out_dir, "processes.csv")
    with open(paths["processes"], "w") as fh:
        fh.write("k_eq,t_prop,t_body,tau\n")
        for p in d.processes:
            fh.write(p.to_csv_row() + "\n")

    paths["joint_costs"] = os.path.join(out_dir, "joint_costs.csv")
    _write_matrix(paths["joint_costs"], d.joint_costs)

    paths["gamma"] = os.path.join(out_dir, "gamma.csv")
    _write_matrix(paths["gamma"], build_gamma_matrix(d))

    paths["lut"] = os.path.join(out_dir, "lut.json")
    with open(paths["lut"], "w") as fh:
        json.dump(build_controller_lut(d), fh, indent=1)

    paths["surface"] = os.path.join(out_dir, "surface.csv")
    with open(paths["surface"], "w") as fh:
        fh.write("k_eq,t_prop,t_body,tau\n")
        for p in d.surface_sweep:
            fh.write(p.to_csv_row() + "\n")

    paths["adjacency"] = os.path.join(out_dir, "adjacency.csv")
    with open(paths["adjacency"], "w") as fh:
        fh.write("i,j,kind,j_sym\n")
        for i, j, kind, val in d.adjacency:
            fh.write(f"{i},{j},{kind},{val!r}\n")
        for i, j, val in d.sphere_pairs:
            fh.write(f"{i},{j},sphere,{val!r}\n")

    manifest = {
        "tool_version": TOOL_VERSION,
        "seed": d.seed,
        "j_star": d.j_star,
        "phi_m": d.phi_m,
        "bounds": d.bounds.to_dict(),
        "n_classes": len(d),
        "surface_ids": list(map(int, d.surface_ids)),
        "hashes": {k: _sha256(v) for k, v in paths.items()},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
    return out_dir


def load_discrete_set(in_dir) -> DiscreteSet:
    manifest = json.load(open(os.path.join(in_dir, "manifest.json")))
    bounds = ParamBounds.from_dict(manifest["bounds"])

    def read_procs(name):
        rows = open(os.path.join(in_dir, name)).read().strip().splitlines()[1:]
        return [ProcessParams.from_csv_row(r) for r in rows]

    processes = read_procs("processes.csv")
    surface = read_procs("surface.csv")
    costs = _read_matrix(os.path.join(in_dir, "joint_costs.csv"))

    lut = json.load(open(os.path.join(in_dir, "lut.json")))
    controllers = [
        DesignResult(
            rule=HomogeneousRule.from_dict(entry["rule"]),
            pid=PidParams.from_dict(entry["pid"]),
            ise_value=float(entry["ise"]),
            a0=math.nan,
            omega0=math.nan,
        )
        for entry in lut
    ]

    adjacency = []
    sphere_pairs = []
    adj_path = os.path.join(in_dir, "adjacency.csv")
    if os.path.exists(adj_path):
        for line in open(adj_path).read().strip().splitlines()[1:]:
            i, j, kind, val = line.split(",")
            if kind == "sphere":
                sphere_pairs.append((int(i), int(j), float(val)))
            else:
                adjacency.append((int(i), int(j), kind, float(val)))

    return DiscreteSet(
        processes=processes,
        surface_ids=list(map(int, manifest["surface_ids"])),
        joint_costs=costs,
        controllers=controllers,
        j_star=float(manifest["j_star"]),
        phi_m=float(manifest["phi_m"]),
        bounds=bounds,
        adjacency=adjacency,
        surface_sweep=surface,
        sphere_pairs=sphere_pairs,
        seed=int(manifest.get("seed", 0)),
    )
