"""Command-line pipeline driver.

Subcommands cover the full workflow: discretize a parameter box, search
the distinguishing excitation phase, generate labeled oscillation data,
train the classifier, identify a recorded trajectory, print tuning-rule
gains for a measured cycle, run open/closed-loop simulations, evaluate a
trained model, and run the whole pipeline end to end.

Every artifact directory gets a manifest with input hashes, seeds and the
tool version, so a stage re-run with identical inputs reproduces its
outputs.  Plots are emitted as CSV plus a gnuplot script rather than
rendered images.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .data import (
    GenSpec,
    generate,
    load_dataset,
    preprocess,
    sample_test_processes,
    samples_to_arrays,
    save_dataset,
)
from .discretize import TOOL_VERSION, build, build_gamma_matrix, load_discrete_set, save_discrete_set
from .errors import MrftIdError
from .network import (
    TrainConfig,
    evaluate,
    infer,
    init_network,
    load_network,
    save_network,
    train,
)
from .process import ParamBounds, ProcessParams
from .relay import MrftConfig, detect_steady_cycle, detect_steady_cycles, hb_predict
from .simulate import (
    MrftController,
    PidController,
    SimConfig,
    TakeoffConfig,
    TakeoffMrftController,
    Trajectory,
    ZeroController,
    simulate,
)
from .tuning import (
    HomogeneousRule,
    IseScenario,
    PidParams,
    estimate_k_eq,
    find_distinguishing_phase,
    ise,
    joint_cost,
    optimize_controller,
    phase_margin,
    pid_from_oscillation,
)

# Reference metrics reported by a full-scale (208-class) build, printed
# alongside desk-scale results for orientation; never asserted.
FULL_SCALE_REFERENCE = {
    "verification": {"accuracy_pct": 38.46, "mean_j_pt_pct": 0.30,
                     "max_j_pt_pct": 5.03, "min_phase_margin_deg": 13.73},
    "test": {"mean_j_pt_pct": 0.53, "max_j_pt_pct": 3.51,
             "min_phase_margin_deg": 15.53},
    "n_classes": 208,
}


def _load_config(path):
    if path is None:
        return {}
    text = open(path, "rb").read()
    if str(path).endswith(".toml"):
        import tomllib

        return tomllib.loads(text.decode())
    return json.loads(text)


def _bounds_from_config(cfg):
    if "bounds" in cfg:
        return ParamBounds.from_dict(cfg["bounds"])
    return ParamBounds()


def _scen_from_config(cfg):
    return IseScenario(**cfg.get("ise_scenario", {}))


def _sha256_file(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def _write_manifest(out_dir, stage, seed, inputs, extra=None):
    manifest = {
        "tool_version": TOOL_VERSION,
        "stage": stage,
        "seed": seed,
        "inputs": {k: _sha256_file(v) for k, v in inputs.items()
                   if v and os.path.exists(v)},
    }
    if extra:
        manifest.update(extra)
    path = os.path.join(out_dir, f"{stage}_manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1)


def _gnuplot_script(csv_path, out_path, columns=("pv", "u")):
    gp = out_path + ".gp"
    with open(gp, "w") as fh:
        fh.write(f'set datafile separator ","\nset key autotitle columnhead\n')
        plots = ", ".join(
            f'"{os.path.basename(csv_path)}" using 1:{i + 2} with lines'
            for i in range(len(columns))
        )
        fh.write(f"plot {plots}\n")
    return gp


# ---------------------------------------------------------------------------
# subcommands

def cmd_discretize(args):
    cfg = _load_config(args.config)
    bounds = _bounds_from_config(cfg)
    j_star = float(cfg.get("j_star", 0.10))
    phi_m = math.radians(float(cfg.get("phi_m_deg", 20.0)))
    d = build(bounds, j_star=j_star, phi_m=phi_m, scen=_scen_from_config(cfg),
              seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    save_discrete_set(d, args.out)
    _write_manifest(args.out, "discretize", args.seed,
                    {"config": args.config},
                    {"n_classes": len(d)})
    print(f"discretized {len(d)} classes -> {args.out}")
    return 0


def cmd_find_phase(args):
    cfg = _load_config(args.config)
    bounds = _bounds_from_config(cfg)
    n = int(cfg.get("n_processes", 12))
    grid = cfg.get("beta_grid")
    grid = (np.asarray(grid, dtype=float) if grid
            else np.linspace(-0.9, 0.0, 9))
    phi_m = math.radians(float(cfg.get("phi_m_deg", 20.0)))
    procs = sample_test_processes(bounds, n, seed=args.seed)
    beta_d, info = find_distinguishing_phase(
        procs, phi_m, grid, scen=_scen_from_config(cfg), full_output=True
    )
    report = {
        "beta_d": beta_d,
        "phase_deg": math.degrees(math.asin(beta_d)),
        "beta_grid": [float(b) for b in info.betas],
        "worst_case_deterioration": {f"{k:.4f}": v
                                     for k, v in info.max_deterioration.items()},
        "n_processes": n,
        "seed": args.seed,
    }
    print(f"distinguishing beta: {beta_d:.4f} "
          f"(phase {report['phase_deg']:.2f} deg)")
    for b, det in info.max_deterioration.items():
        print(f"  candidate beta {b:+.4f}: worst-case deterioration "
              f"{det * 100:.2f}%")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(report, fh, indent=1)
    return 0


def cmd_gen_data(args):
    cfg = _load_config(args.config)
    d = load_discrete_set(args.set)
    spec = GenSpec.from_dict(cfg.get("gen", {}))
    if args.jobs > 1:
        train_s, verify_s = _generate_parallel(d, spec, args.seed, args.jobs)
    else:
        train_s, verify_s = generate(d, spec, seed=args.seed)
    save_dataset(train_s, verify_s, args.out, spec, args.seed, len(d))
    _write_manifest(args.out, "gen_data", args.seed,
                    {"config": args.config,
                     "set": os.path.join(args.set, "manifest.json")})
    print(f"generated {len(train_s)} train / {len(verify_s)} verify samples "
          f"-> {args.out}")
    return 0


def _gen_one_class(task):
    from .data import LabeledSample, _sample_with_retries  # noqa: F401

    proc, spec, child, idx = task
    rng = np.random.default_rng(child)
    out_t, out_v = [], []
    for _ in range(spec.n_train):
        x, meta = _sample_with_retries(proc, spec, rng, idx)
        out_t.append((x, idx, meta))
    for _ in range(spec.n_verify):
        x, meta = _sample_with_retries(proc, spec, rng, idx)
        out_v.append((x, idx, meta))
    return idx, out_t, out_v


def _generate_parallel(d, spec, seed, jobs):
    from .data import LabeledSample

    root = np.random.SeedSequence(seed)
    children = root.spawn(len(d))
    tasks = [(p, spec, children[i], i) for i, p in enumerate(d.processes)]
    train_s, verify_s = [], []
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        for idx, out_t, out_v in pool.map(_gen_one_class, tasks):
            train_s.extend(LabeledSample(x, lbl, meta) for x, lbl, meta in out_t)
            verify_s.extend(LabeledSample(x, lbl, meta) for x, lbl, meta in out_v)
    return train_s, verify_s


def cmd_train(args):
    cfg = _load_config(args.config)
    d = load_discrete_set(args.set)
    (xt, yt), _, _ = load_dataset(args.data)
    tcfg_dict = dict(cfg.get("train", {}))
    hidden = tcfg_dict.pop("hidden_dims", [3000, 1000])
    dropout = tcfg_dict.pop("dropout", [0.5] * len(hidden))
    dims = (xt.shape[1], *hidden, len(d))
    net = init_network(dims, dropout=tuple(dropout), seed=args.seed)
    gamma = build_gamma_matrix(d)
    tcfg = TrainConfig(seed=args.seed, gamma=gamma, **tcfg_dict)
    curve = train(net, xt, yt, tcfg)
    save_network(net, args.out, meta={
        "seed": args.seed,
        "epochs": tcfg.epochs,
        "gamma_sha256": hashlib.sha256(gamma.tobytes()).hexdigest(),
        "set_dir": os.path.abspath(args.set),
    })
    curve_path = str(args.out) + "_loss.csv"
    with open(curve_path, "w") as fh:
        fh.write("epoch,loss\n")
        for i, v in enumerate(curve):
            fh.write(f"{i},{v!r}\n")
    print(f"trained {dims} for {tcfg.epochs} epochs; "
          f"final loss {curve[-1]:.4f} -> {args.out}.npz")
    return 0


def identify_trajectory(traj, net, d, rel_tol=0.1, ensemble=5):
    """Classify a recorded relay trajectory against a discretized set.

    Up to ``ensemble`` consecutive steady cycles vote by averaged softmax
    probability; identifying each cycle of the tail independently and
    combining them makes the result robust to single-cycle flukes.
    """
    cycles = detect_steady_cycles(traj, rel_tol=rel_tol, max_cycles=ensemble)
    probs = np.mean([infer(net, preprocess(o)).probabilities for o in cycles],
                    axis=0)
    idx = int(np.argmax(probs))
    osc = cycles[-1]
    p_hat = d.processes[idx]
    h_measured = 0.5 * (np.max(traj.u) - np.min(traj.u))
    k_eq = estimate_k_eq(osc, h_measured, p_hat)
    rule = d.class_rule(idx)
    deployed = pid_from_oscillation(rule, osc, h_measured)
    return {
        "class": idx,
        "probability": float(probs[idx]),
        "n_cycles": len(cycles),
        "process": p_hat.to_dict(),
        "k_eq_estimate": k_eq,
        "oscillation": {"a0": osc.a0, "omega0": osc.omega0},
        "h_measured": h_measured,
        "pid_lut": d.controllers[idx].pid.to_dict(),
        "pid_deployed": deployed.to_dict(),
        "rule": rule.to_dict(),
    }


def cmd_identify(args):
    d = load_discrete_set(args.set)
    net = load_network(args.weights)
    traj = Trajectory.from_csv(args.traj)
    report = identify_trajectory(traj, net, d)
    print(f"identified class {report['class']} "
          f"(p={report['probability']:.3f})")
    p = report["process"]
    print(f"  t_prop={p['t_prop']:.4f} s  t_body={p['t_body']:.4f} s  "
          f"tau={p['tau']:.4f} s  k_eq~{report['k_eq_estimate']:.3f}")
    pid = report["pid_deployed"]
    print(f"  deployed PD/PID: kp={pid['kp']:.4f}  "
          f"ti={pid['ti'] if pid['ti'] is not None else 'inf'}  "
          f"td={pid['td']:.4f}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(report, fh, indent=1)
    return 0


def cmd_tune(args):
    traj = Trajectory.from_csv(args.traj)
    osc = detect_steady_cycle(traj, rel_tol=args.rel_tol)
    h = args.h if args.h is not None else 0.5 * (np.max(traj.u) - np.min(traj.u))
    c2 = math.inf if args.c2 is None else args.c2
    rule = HomogeneousRule(c1=args.c1, c2=c2, c3=args.c3, beta=args.beta)
    pid = pid_from_oscillation(rule, osc, h)
    print(f"cycle: a0={osc.a0:.5f}, omega0={osc.omega0:.4f} rad/s, h={h:.4f}")
    print(f"kp={pid.kp:.6f}")
    print(f"ti={'inf' if math.isinf(pid.ti) else f'{pid.ti:.6f}'}")
    print(f"td={pid.td:.6f}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"oscillation": {"a0": osc.a0, "omega0": osc.omega0},
                       "h": h, "pid": pid.to_dict()}, fh, indent=1)
    return 0


def _controller_from_config(cfg):
    kind = cfg.get("type", "mrft")
    if kind == "zero":
        return ZeroController()
    if kind == "pid":
        return PidController(
            kp=float(cfg["kp"]),
            ti=float(cfg.get("ti", math.inf) or math.inf),
            td=float(cfg.get("td", 0.0)),
            tf=float(cfg.get("derivative_filter", 0.0)),
        )
    if kind == "mrft":
        return MrftController(MrftConfig(
            beta=float(cfg.get("beta", -0.73)),
            h=float(cfg.get("h", 1.0)),
            u0_offset=float(cfg.get("u0_offset", 0.0)),
        ))
    if kind == "takeoff":
        return TakeoffMrftController(
            MrftConfig(beta=float(cfg.get("beta", -0.73)),
                       h=float(cfg.get("h", 1.0))),
            TakeoffConfig(k_i=float(cfg.get("k_i", 0.5)),
                          z_ref=float(cfg.get("z_ref", 1.0)),
                          zdot_max=float(cfg.get("zdot_max", 0.5)),
                          condition=cfg.get("condition", "or")),
        )
    raise ValueError(f"unknown controller type {kind!r}")


def cmd_simulate(args):
    cfg = _load_config(args.config)
    p = ProcessParams.from_dict(cfg["process"])
    controller = _controller_from_config(cfg.get("controller", {}))
    sim_cfg = SimConfig.from_dict(cfg.get("sim", {}))
    if args.seed is not None:
        sim_cfg.seed = args.seed
    traj = simulate(p, controller, sim_cfg)
    traj.to_csv(args.out)
    gp = _gnuplot_script(args.out, args.out)
    print(f"simulated {len(traj.t)} samples -> {args.out} (plot: {gp})")
    return 0


def cmd_eval(args):
    d = load_discrete_set(args.set)
    net = load_network(args.weights)
    _, (xv, yv), _ = load_dataset(args.data)
    metrics = evaluate(net, xv, yv, d)
    _print_metrics("verification", metrics)
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(_metrics_report(metrics), fh, indent=1)
    return 0


def _metrics_report(metrics, extra=None):
    rep = {
        "accuracy_pct": 100.0 * metrics["accuracy"],
        "mean_j_pt_pct": 100.0 * metrics["mean_j_pt"],
        "max_j_pt_pct": 100.0 * metrics["max_j_pt"],
        "min_phase_margin_deg": math.degrees(metrics["min_phase_margin"]),
        "reference_full_scale": FULL_SCALE_REFERENCE,
    }
    if extra:
        rep.update(extra)
    return rep


def _print_metrics(label, metrics):
    print(f"{label}: accuracy {100 * metrics['accuracy']:.2f}%  "
          f"mean J {100 * metrics['mean_j_pt']:.2f}%  "
          f"max J {100 * metrics['max_j_pt']:.2f}%  "
          f"min margin {math.degrees(metrics['min_phase_margin']):.2f} deg")
    ref = FULL_SCALE_REFERENCE["verification"]
    print(f"  (full-scale reference, {FULL_SCALE_REFERENCE['n_classes']} "
          f"classes: accuracy {ref['accuracy_pct']}%, mean J "
          f"{ref['mean_j_pt_pct']}%, max J {ref['max_j_pt_pct']}%, "
          f"min margin {ref['min_phase_margin_deg']} deg)")


def cmd_pipeline(args):
    cfg = _load_config(args.config)
    os.makedirs(args.out, exist_ok=True)
    timings = {}

    def stage(name, fn):
        t0 = time.perf_counter()
        out = fn()
        timings[name] = time.perf_counter() - t0
        print(f"[{name}] done in {timings[name]:.1f} s")
        return out

    bounds = _bounds_from_config(cfg)
    j_star = float(cfg.get("j_star", 0.10))
    phi_m = math.radians(float(cfg.get("phi_m_deg", 20.0)))
    scen = _scen_from_config(cfg)

    set_dir = os.path.join(args.out, "set")
    d = stage("discretize", lambda: build(bounds, j_star=j_star, phi_m=phi_m,
                                          scen=scen, seed=args.seed))
    save_discrete_set(d, set_dir)

    spec = GenSpec.from_dict(cfg.get("gen", {}))
    data_dir = os.path.join(args.out, "data")
    train_s, verify_s = stage("gen-data",
                              lambda: generate(d, spec, seed=args.seed))
    save_dataset(train_s, verify_s, data_dir, spec, args.seed, len(d))

    xt, yt = samples_to_arrays(train_s)
    xv, yv = samples_to_arrays(verify_s)
    tcfg_dict = dict(cfg.get("train", {}))
    hidden = tcfg_dict.pop("hidden_dims", [3000, 1000])
    dropout = tcfg_dict.pop("dropout", [0.5] * len(hidden))
    net = init_network((xt.shape[1], *hidden, len(d)), dropout=tuple(dropout),
                       seed=args.seed)
    gamma = build_gamma_matrix(d)
    tcfg = TrainConfig(seed=args.seed, gamma=gamma, **tcfg_dict)
    stage("train", lambda: train(net, xt, yt, tcfg))
    save_network(net, os.path.join(args.out, "weights"),
                 meta={"seed": args.seed, "epochs": tcfg.epochs})

    metrics = stage("eval", lambda: evaluate(net, xv, yv, d))
    _print_metrics("verification", metrics)

    report = _metrics_report(metrics, extra={
        "n_classes": len(d),
        "timings_s": timings,
        "seed": args.seed,
    })

    n_test = int(cfg.get("n_test_processes", 0))
    if n_test > 0:
        test_report = stage(
            "identify-test",
            lambda: _off_set_test(d, net, spec, n_test, args.seed, scen),
        )
        report["off_set_test"] = test_report
        print(f"off-set test: mean J {test_report['mean_j_pt_pct']:.2f}%  "
              f"max J {test_report['max_j_pt_pct']:.2f}%  "
              f"unstable {test_report['n_unstable']}")

    with open(os.path.join(args.out, "report.json"), "w") as fh:
        json.dump(report, fh, indent=1)
    _write_manifest(args.out, "pipeline", args.seed, {"config": args.config},
                    {"n_classes": len(d)})
    print(f"pipeline report -> {os.path.join(args.out, 'report.json')}")
    return 0


def _off_set_test(d, net, spec, n_test, seed, scen):
    """Identify freshly sampled plants and score the looked-up controllers."""
    probes = sample_test_processes(d.bounds, n_test, seed=seed + 1)
    rng = np.random.default_rng(seed + 2)
    j_vals, unstable = [], 0
    for probe in probes:
        a_df, _ = hb_predict(probe, spec.h, spec.beta)
        snr_db = rng.uniform(*spec.snr_db)
        sigma = a_df / 10.0 ** (snr_db / 20.0)
        bias = rng.uniform(-spec.bias_frac, spec.bias_frac) * spec.h
        from .simulate import run_mrft

        traj, _ = run_mrft(probe, MrftConfig(spec.beta, spec.h), dt=1e-3,
                           cycles=24.0, noise_power=sigma**2, input_bias=bias,
                           seed=int(rng.integers(2**31 - 1)),
                           rel_tol=spec.steady_rel_tol,
                           bias_trim=spec.bias_trim)
        report = identify_trajectory(traj, net, d,
                                     rel_tol=spec.steady_rel_tol)
        c_pred = PidParams.from_dict(report["pid_deployed"])
        self_res = optimize_controller(probe, d.phi_m, scen=scen, h=spec.h)
        j = joint_cost(c_pred, probe, scen, self_res.ise_value)
        if math.isinf(j):
            unstable += 1
        else:
            j_vals.append(max(0.0, j))
    return {
        "n": n_test,
        "n_unstable": unstable,
        "mean_j_pt_pct": 100.0 * float(np.mean(j_vals)) if j_vals else math.nan,
        "max_j_pt_pct": 100.0 * float(np.max(j_vals)) if j_vals else math.nan,
        "reference_full_scale": FULL_SCALE_REFERENCE["test"],
    }


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mrftid",
        description="Relay-excitation system identification pipeline",
    )
    parser.add_argument("--config", default=None, help="JSON/TOML config file")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--jobs", type=int, default=1,
                        help="parallel workers for data generation")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("discretize", help="build a discretized plant set")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_discretize)

    sp = sub.add_parser("find-phase", help="search the distinguishing phase")
    sp.add_argument("--out", default=None)
    sp.set_defaults(fn=cmd_find_phase)

    sp = sub.add_parser("gen-data", help="generate labeled oscillation data")
    sp.add_argument("--set", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train", help="train the classifier")
    sp.add_argument("--data", required=True)
    sp.add_argument("--set", required=True)
    sp.add_argument("--out", required=True, help="weights path prefix")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("identify", help="identify a recorded trajectory")
    sp.add_argument("--traj", required=True)
    sp.add_argument("--weights", required=True)
    sp.add_argument("--set", required=True)
    sp.add_argument("--out", default=None)
    sp.set_defaults(fn=cmd_identify)

    sp = sub.add_parser("tune", help="tuning-rule gains for a recorded cycle")
    sp.add_argument("--traj", required=True)
    sp.add_argument("--c1", type=float, required=True)
    sp.add_argument("--c2", type=float, default=None, help="blank = PD")
    sp.add_argument("--c3", type=float, required=True)
    sp.add_argument("--beta", type=float, default=-0.73)
    sp.add_argument("--h", type=float, default=None)
    sp.add_argument("--rel-tol", type=float, default=0.1)
    sp.add_argument("--out", default=None)
    sp.set_defaults(fn=cmd_tune)

    sp = sub.add_parser("simulate", help="closed-loop simulation to CSV")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_simulate)

    sp = sub.add_parser("eval", help="metrics of a trained model")
    sp.add_argument("--weights", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--set", required=True)
    sp.add_argument("--out", default=None)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("pipeline", help="all stages end to end")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_pipeline)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (MrftIdError, ValueError, OSError, KeyError, json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
