"""Classifier input preparation and labeled data generation.

One steady relay cycle becomes a fixed-length feature vector: the cycle's
pv and u samples at 1 ms, each channel zero-centered and scaled to unit
peak over the cycle, zero-padded to the window of the slowest admissible
plant (2260 samples, 2.26 s) and concatenated pv-then-u into 4520 values.
Centering removes any constant bias, scaling removes the plant gain and
relay amplitude, so the vector depends only on the oscillation's shape
and time scale.

Training data comes from relay runs on every class of a discretized set
under randomized measurement noise and input bias; each sample is the
preprocessed steady cycle labeled with its class index.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import GenerationError, NotSteadyError, TooSlowError
from .process import ParamBounds, ProcessParams
from .relay import MrftConfig, Oscillation, hb_predict
from .simulate import run_mrft

SAMPLE_DT = 1e-3
CYCLE_LEN = 2260
FEATURE_LEN = 2 * CYCLE_LEN


@dataclass
class GenSpec:
    """Data-generation settings.

    Noise is drawn as a signal-to-noise ratio in dB (oscillation amplitude
    over noise standard deviation), uniform over ``snr_db``; the input
    bias is uniform within ``bias_frac`` of the relay amplitude.
    """

    n_train: int = 30
    n_verify: int = 5
    snr_db: tuple = (20.0, 40.0)
    bias_frac: float = 0.5
    beta: float = -0.73
    h: float = 1.0
    steady_rel_tol: float = 0.1
    max_retries: int = 5
    bias_trim: bool = True

    def __post_init__(self):
        if self.n_train < 1 or self.n_verify < 0:
            raise ValueError("sample counts must be positive")
        if not (0.0 <= self.bias_frac <= 0.5):
            raise ValueError("bias fraction must lie in [0, 0.5]")
        if not (abs(self.beta) < 1.0 and self.h > 0.0):
            raise ValueError("invalid relay settings")

    def to_dict(self) -> dict:
        return {
            "n_train": self.n_train,
            "n_verify": self.n_verify,
            "snr_db": list(self.snr_db),
            "bias_frac": self.bias_frac,
            "beta": self.beta,
            "h": self.h,
            "steady_rel_tol": self.steady_rel_tol,
            "max_retries": self.max_retries,
            "bias_trim": self.bias_trim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GenSpec":
        d = dict(d)
        if "snr_db" in d:
            d["snr_db"] = tuple(d["snr_db"])
        return cls(**d)


@dataclass
class LabeledSample:
    x: np.ndarray
    label: int
    meta: dict = field(default_factory=dict)


def _normalize_channel(samples: np.ndarray, n_pad: int) -> np.ndarray:
    """Center and unit-scale over the cycle region, zero-pad the tail."""
    centered = samples - samples.mean()
    peak = np.max(np.abs(centered))
    if peak == 0.0:
        raise ValueError("cycle channel is constant; nothing to normalize")
    out = np.zeros(n_pad)
    out[: len(samples)] = centered / peak
    return out


def preprocess(osc: Oscillation) -> np.ndarray:
    """Feature vector from one steady cycle.

    The cycle (already delimited at a positive-going relay switch) is
    resampled to 1 ms if recorded at a different rate, normalized per
    channel over the cycle region only, padded with exact zeros and
    concatenated pv-then-u.
    """
    if not osc.steady:
        raise NotSteadyError("preprocessing requires a steady cycle")
    pv, u = osc.pv, osc.u
    if abs(osc.dt - SAMPLE_DT) > 1e-12:
        n_new = int(round(len(pv) * osc.dt / SAMPLE_DT))
        if n_new < 2:
            raise TooSlowError("cycle resamples to fewer than 2 samples")
        t_old = np.arange(len(pv)) * osc.dt
        t_new = np.arange(n_new) * SAMPLE_DT
        pv = np.interp(t_new, t_old, pv)
        u = np.interp(t_new, t_old, u)
    if len(pv) > CYCLE_LEN:
        raise TooSlowError(
            f"cycle of {len(pv)} samples exceeds the {CYCLE_LEN}-sample window "
            f"({CYCLE_LEN * SAMPLE_DT:.2f} s)"
        )
    return np.concatenate(
        [_normalize_channel(pv, CYCLE_LEN), _normalize_channel(u, CYCLE_LEN)]
    )


def _one_sample(p, spec, rng):
    a_df, _ = hb_predict(p, spec.h, spec.beta)
    snr_db = rng.uniform(*spec.snr_db)
    sigma = a_df / 10.0 ** (snr_db / 20.0)
    bias = rng.uniform(-spec.bias_frac, spec.bias_frac) * spec.h
    sim_seed = int(rng.integers(2**31 - 1))
    _, osc = run_mrft(
        p,
        MrftConfig(beta=spec.beta, h=spec.h),
        dt=SAMPLE_DT,
        cycles=24.0,
        noise_power=sigma**2,
        input_bias=bias,
        seed=sim_seed,
        rel_tol=spec.steady_rel_tol,
        bias_trim=spec.bias_trim,
    )
    x = preprocess(osc)
    return x, {"noise_power": sigma**2, "input_bias": bias, "seed": sim_seed,
               "snr_db": snr_db}


def _sample_with_retries(p, spec, rng, class_idx):
    last = None
    for _ in range(spec.max_retries):
        try:
            return _one_sample(p, spec, rng)
        except (NotSteadyError, TooSlowError) as err:
            last = err
    raise GenerationError(
        f"class {class_idx} ({p.triple}) failed to produce a steady cycle "
        f"after {spec.max_retries} attempts: {last}"
    )


def generate(d, spec: GenSpec = GenSpec(), seed: int = 0):
    """Labeled train/verify samples for every class of a discretized set.

    Deterministic in ``seed``; per-sample generators are spawned from one
    seed sequence, so per-class counts and ordering are reproducible.
    Returns (train, verify) as lists of LabeledSample.
    """
    n_classes = len(d)
    root = np.random.SeedSequence(seed)
    children = root.spawn(n_classes)
    train, verify = [], []
    for i, p in enumerate(d.processes):
        rng = np.random.default_rng(children[i])
        for _ in range(spec.n_train):
            x, meta = _sample_with_retries(p, spec, rng, i)
            train.append(LabeledSample(x, i, meta))
        for _ in range(spec.n_verify):
            x, meta = _sample_with_retries(p, spec, rng, i)
            verify.append(LabeledSample(x, i, meta))
    return train, verify


def sample_test_processes(bounds: ParamBounds, n: int, seed: int = 0):
    """Log-uniform draws of process triples inside the box (gain 1)."""
    if n < 1:
        raise ValueError("need at least one draw")
    rng = np.random.default_rng(seed)
    lo = np.log(np.asarray(bounds.p_min))
    hi = np.log(np.asarray(bounds.p_max))
    out = []
    for _ in range(n):
        trip = np.exp(rng.uniform(lo, hi))
        out.append(ProcessParams(1.0, *trip))
    return out


# ---------------------------------------------------------------------------
# persistence

def samples_to_arrays(samples):
    x = np.stack([s.x for s in samples]) if samples else np.zeros((0, FEATURE_LEN))
    y = np.array([s.label for s in samples], dtype=np.int64)
    return x, y


def save_dataset(train, verify, out_dir, spec: GenSpec, seed: int,
                 n_classes: int):
    os.makedirs(out_dir, exist_ok=True)
    xt, yt = samples_to_arrays(train)
    xv, yv = samples_to_arrays(verify)
    np.save(os.path.join(out_dir, "train_x.npy"), xt)
    np.save(os.path.join(out_dir, "train_y.npy"), yt)
    np.save(os.path.join(out_dir, "verify_x.npy"), xv)
    np.save(os.path.join(out_dir, "verify_y.npy"), yv)
    manifest = {
        "n_classes": n_classes,
        "n_train": len(train),
        "n_verify": len(verify),
        "feature_len": FEATURE_LEN,
        "seed": seed,
        "spec": spec.to_dict(),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
    return out_dir


def load_dataset(in_dir):
    manifest = json.load(open(os.path.join(in_dir, "manifest.json")))
    xt = np.load(os.path.join(in_dir, "train_x.npy"))
    yt = np.load(os.path.join(in_dir, "train_y.npy"))
    xv = np.load(os.path.join(in_dir, "verify_x.npy"))
    yv = np.load(os.path.join(in_dir, "verify_y.npy"))
    return (xt, yt), (xv, yv), manifest


def export_sample_csv(x: np.ndarray, path):
    """Write one feature vector as (index, pv, u) rows for inspection."""
    pv = x[:CYCLE_LEN]
    u = x[CYCLE_LEN:]
    with open(path, "w") as fh:
        fh.write("index,pv,u\n")
        for k in range(CYCLE_LEN):
            fh.write(f"{k},{float(pv[k])!r},{float(u[k])!r}\n")
