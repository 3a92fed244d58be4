"""Fully connected classifier with a joint-cost-weighted softmax loss.

The network maps a preprocessed oscillation cycle to one of N discretized
plant classes: affine -> ReLU -> batch norm -> dropout for each hidden
layer, then an affine output layer.  Training uses plain minibatch SGD.

Misclassifying into a class whose controller barely deteriorates on the
true plant should cost less than misclassifying into a damaging one, so
the softmax is weighted per ground-truth class T:

    p_i = exp(g_i * a_i) / sum_j exp(g_j * a_j),   g_i = 1 + J_iT,

where J_iT is the relative ISE deterioration of class i's controller on
plant T.  With the cross-entropy loss L = -log p_T this gives

    dL/da_k = g_k * (p_k - y_k),

which reduces to the standard softmax gradient when all weights are 1.
(The weight factor multiplies the usual p - y term; the finite-difference
checks in the test suite pin this form.)  The weights depend on the
ground truth, so they exist only at training time; inference uses the
standard softmax over the logits.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import TrainingError

BN_EPS = 1e-8
BN_MOMENTUM = 0.9

FORMAT_VERSION = 1


@dataclass
class Network:
    dims: tuple
    weights: list
    biases: list
    bn_scale: list
    bn_shift: list
    bn_mean: list
    bn_var: list
    dropout: tuple
    mode: str = "infer"

    @property
    def n_hidden(self):
        return len(self.dims) - 2


def init_network(dims, dropout=None, seed=0, init_scale=1.0) -> Network:
    """He-initialized network; dims = (input, hidden..., output)."""
    dims = tuple(int(v) for v in dims)
    if len(dims) < 2:
        raise ValueError("need at least input and output dimensions")
    n_hidden = len(dims) - 2
    if dropout is None:
        dropout = tuple(0.5 for _ in range(n_hidden))
    dropout = tuple(float(r) for r in dropout)
    if len(dropout) != n_hidden:
        raise ValueError("one dropout rate per hidden layer")
    if any(not (0.0 <= r < 1.0) for r in dropout):
        raise ValueError("dropout rates must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for a, b in zip(dims[:-1], dims[1:]):
        weights.append(rng.normal(0.0, init_scale * math.sqrt(2.0 / a), (a, b)))
        biases.append(np.zeros(b))
    return Network(
        dims=dims,
        weights=weights,
        biases=biases,
        bn_scale=[np.ones(h) for h in dims[1:-1]],
        bn_shift=[np.zeros(h) for h in dims[1:-1]],
        bn_mean=[np.zeros(h) for h in dims[1:-1]],
        bn_var=[np.ones(h) for h in dims[1:-1]],
        dropout=dropout,
    )


def forward(net: Network, x, mode: str = "infer", rng=None, want_cache=False):
    """Logits for a batch (or single vector); dropout only in train mode."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != net.dims[0]:
        raise ValueError(
            f"input length {x.shape[1]} does not match network input {net.dims[0]}"
        )
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode}")
    if mode == "train" and rng is None:
        rng = np.random.default_rng(0)

    cache = []
    h = x
    for li in range(net.n_hidden):
        z = h @ net.weights[li] + net.biases[li]
        a = np.maximum(z, 0.0)
        if mode == "train":
            mu = a.mean(axis=0)
            var = a.var(axis=0)
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (a - mu) * inv_std
            net.bn_mean[li] = BN_MOMENTUM * net.bn_mean[li] + (1 - BN_MOMENTUM) * mu
            net.bn_var[li] = BN_MOMENTUM * net.bn_var[li] + (1 - BN_MOMENTUM) * var
        else:
            inv_std = 1.0 / np.sqrt(net.bn_var[li] + BN_EPS)
            xhat = (a - net.bn_mean[li]) * inv_std
        y = net.bn_scale[li] * xhat + net.bn_shift[li]
        if mode == "train" and net.dropout[li] > 0.0:
            keep = 1.0 - net.dropout[li]
            mask = (rng.random(y.shape) < keep) / keep
            y_out = y * mask
        else:
            mask = None
            y_out = y
        cache.append({"x": h, "z": z, "a": a, "xhat": xhat,
                      "inv_std": inv_std, "mask": mask})
        h = y_out
    logits = h @ net.weights[-1] + net.biases[-1]
    if single:
        logits = logits[0]
    if want_cache:
        return logits, (cache, h)
    return logits


def modified_softmax(a, gamma_row):
    """Probabilities from weighted logits, overflow-safe."""
    a = np.asarray(a, dtype=float)
    g = np.asarray(gamma_row, dtype=float)
    if a.shape != g.shape:
        raise ValueError("logits and weight row must have the same shape")
    if not np.all(np.isfinite(a)) or not np.all(np.isfinite(g)):
        raise ValueError("non-finite logits or weights")
    s = g * a
    s -= s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def loss_and_logit_grad(a, truth: int, gamma_row):
    """Cross-entropy of the weighted softmax and its exact logit gradient."""
    a = np.asarray(a, dtype=float)
    g = np.asarray(gamma_row, dtype=float)
    s = g * a
    m = s.max()
    lse = m + math.log(np.exp(s - m).sum())
    loss = lse - s[truth]
    p = np.exp(s - lse)
    grad = g * p
    grad[truth] -= g[truth]
    return float(loss), grad


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 32
    epochs: int = 200
    seed: int = 0
    lr_decay: float = 0.1
    lr_decay_at: float = 2.0 / 3.0
    gamma: np.ndarray | None = None  # N x N loss weights; None = standard

    def __post_init__(self):
        if not (self.learning_rate > 0.0):
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch size and epochs must be at least 1")


def _backward(net, cache, h_last, dlogits):
    grads_w = [None] * len(net.weights)
    grads_b = [None] * len(net.biases)
    grads_scale = [None] * net.n_hidden
    grads_shift = [None] * net.n_hidden

    grads_w[-1] = h_last.T @ dlogits
    grads_b[-1] = dlogits.sum(axis=0)
    dx = dlogits @ net.weights[-1].T

    for li in range(net.n_hidden - 1, -1, -1):
        c = cache[li]
        if c["mask"] is not None:
            dx = dx * c["mask"]
        xhat, inv_std = c["xhat"], c["inv_std"]
        grads_scale[li] = (dx * xhat).sum(axis=0)
        grads_shift[li] = dx.sum(axis=0)
        dxhat = dx * net.bn_scale[li]
        m = dx.shape[0]
        da = (inv_std / m) * (
            m * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
        )
        dz = da * (c["z"] > 0.0)
        grads_w[li] = c["x"].T @ dz
        grads_b[li] = dz.sum(axis=0)
        dx = dz @ net.weights[li].T
    return grads_w, grads_b, grads_scale, grads_shift


def train_step(net, xb, yb, gamma, lr, rng):
    """One SGD minibatch update; returns the mean loss over the batch."""
    logits, (cache, h_last) = forward(net, xb, mode="train", rng=rng,
                                      want_cache=True)
    b, n = logits.shape
    if gamma is None:
        g = np.ones((b, n))
    else:
        g = gamma[:, yb].T  # row i: weights for sample i's ground truth
    s = g * logits
    s_shift = s - s.max(axis=1, keepdims=True)
    e = np.exp(s_shift)
    p = e / e.sum(axis=1, keepdims=True)
    idx = np.arange(b)
    losses = -np.log(np.maximum(p[idx, yb], 1e-300))
    dlogits = g * p
    dlogits[idx, yb] -= g[idx, yb]
    dlogits /= b

    gw, gb, gs, gsh = _backward(net, cache, h_last, dlogits)
    for li in range(len(net.weights)):
        net.weights[li] -= lr * gw[li]
        net.biases[li] -= lr * gb[li]
    for li in range(net.n_hidden):
        net.bn_scale[li] -= lr * gs[li]
        net.bn_shift[li] -= lr * gsh[li]
    return float(losses.mean())


def train(net: Network, x, y, cfg: TrainConfig):
    """Minibatch SGD; returns the per-epoch mean loss curve."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    n_out = net.dims[-1]
    if y.min() < 0 or y.max() >= n_out:
        raise ValueError("labels out of range for the output layer")
    if cfg.gamma is not None and cfg.gamma.shape != (n_out, n_out):
        raise ValueError("gamma matrix shape must match the output layer")
    rng = np.random.default_rng(cfg.seed)
    curve = []
    n = len(x)
    decay_epoch = int(cfg.epochs * cfg.lr_decay_at)
    lr = cfg.learning_rate
    for epoch in range(cfg.epochs):
        if epoch == decay_epoch:
            lr = cfg.learning_rate * cfg.lr_decay
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            sel = order[start:start + cfg.batch_size]
            losses.append(train_step(net, x[sel], y[sel], cfg.gamma, lr, rng))
        mean_loss = float(np.mean(losses))
        if not math.isfinite(mean_loss):
            raise TrainingError(f"training diverged at epoch {epoch}")
        curve.append(mean_loss)
    net.mode = "infer"
    return curve


@dataclass
class Prediction:
    class_index: int
    probabilities: np.ndarray


def infer(net: Network, x) -> Prediction:
    """Most likely class under the standard softmax of the logits."""
    logits = forward(net, x, mode="infer")
    if logits.ndim != 1:
        raise ValueError("infer expects a single feature vector")
    z = logits - logits.max()
    e = np.exp(z)
    p = e / e.sum()
    return Prediction(class_index=int(np.argmax(logits)), probabilities=p)


def evaluate(net: Network, x, y, d, extra_pairs=None):
    """Classification metrics on labeled data against a discretized set.

    J between the predicted and true class comes from the set's joint-cost
    matrix (clipped at zero for reporting); the realized margin is that of
    the predicted controller on the true plant.  ``extra_pairs`` may carry
    (probe_process, self_cost) tuples for samples whose truth lies off the
    set, aligned with the tail of x/y.
    """
    from .tuning import phase_margin

    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    preds = np.array([infer(net, xi).class_index for xi in x], dtype=np.int64)
    acc = float(np.mean(preds == y))
    j_vals, margins = [], []
    for pred, truth in zip(preds, y):
        j = 0.0 if pred == truth else max(0.0, float(d.joint_costs[pred, truth]))
        j_vals.append(j)
        margins.append(phase_margin(d.controllers[pred].pid, d.processes[truth]))
    return {
        "accuracy": acc,
        "mean_j_pt": float(np.mean(j_vals)),
        "max_j_pt": float(np.max(j_vals)),
        "min_phase_margin": float(np.min(margins)),
        "predictions": preds,
    }


# ---------------------------------------------------------------------------
# persistence

def save_network(net: Network, path_prefix, meta=None):
    """Write weights to <prefix>.npz and a JSON header to <prefix>.json."""
    arrays = {}
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        arrays[f"w{i}"] = w
        arrays[f"b{i}"] = b
    for i in range(net.n_hidden):
        arrays[f"bn_scale{i}"] = net.bn_scale[i]
        arrays[f"bn_shift{i}"] = net.bn_shift[i]
        arrays[f"bn_mean{i}"] = net.bn_mean[i]
        arrays[f"bn_var{i}"] = net.bn_var[i]
    np.savez(str(path_prefix) + ".npz", **arrays)
    header = {
        "format_version": FORMAT_VERSION,
        "dims": list(net.dims),
        "dropout": list(net.dropout),
    }
    if meta:
        header.update(meta)
    with open(str(path_prefix) + ".json", "w") as fh:
        json.dump(header, fh, indent=1)
    return str(path_prefix) + ".npz"


def load_network(path_prefix) -> Network:
    header = json.load(open(str(path_prefix) + ".json"))
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported weights format: {header.get('format_version')}")
    data = np.load(str(path_prefix) + ".npz")
    dims = tuple(header["dims"])
    n_hidden = len(dims) - 2
    return Network(
        dims=dims,
        weights=[data[f"w{i}"] for i in range(len(dims) - 1)],
        biases=[data[f"b{i}"] for i in range(len(dims) - 1)],
        bn_scale=[data[f"bn_scale{i}"] for i in range(n_hidden)],
        bn_shift=[data[f"bn_shift{i}"] for i in range(n_hidden)],
        bn_mean=[data[f"bn_mean{i}"] for i in range(n_hidden)],
        bn_var=[data[f"bn_var{i}"] for i in range(n_hidden)],
        dropout=tuple(header["dropout"]),
    )
