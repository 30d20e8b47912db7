"""Model-error emulator: a small dense ReLU network trained on analysis increments.

The network maps per-grid-point predictors (location, cycle phase, and a
column of the background state around the point) to the error accumulated
over one assimilation window at that point.  Run over many background states
in inference mode it becomes a generator of model-error samples.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .covmodel import SampleSet
from .errors import ContractViolation, InsufficientSamples, TrainingDiverged
from .matio import decode_matrix, encode_matrix

log = logging.getLogger(__name__)

NN_MAGIC = "WERRNN"
NN_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_widths: tuple = (138, 138, 138)
    output_dim: int = 1
    dropout_rate: float = 0.2

    def __post_init__(self):
        widths = tuple(int(w) for w in self.hidden_widths)
        object.__setattr__(self, "hidden_widths", widths)
        if self.input_dim < 1 or self.output_dim < 1 or any(w < 1 for w in widths):
            raise ContractViolation("layer widths must be >= 1")
        if not 0 <= self.dropout_rate < 1:
            raise ContractViolation("dropout rate must lie in [0, 1)")

    @property
    def dims(self):
        return (self.input_dim,) + self.hidden_widths + (self.output_dim,)

    @property
    def n_params(self):
        d = self.dims
        return sum(d[i + 1] * (d[i] + 1) for i in range(len(d) - 1))


@dataclass
class MlpParams:
    """Weights ``W`` of shape ``(out, in)`` and biases of shape ``(out,)`` per layer."""

    weights: list
    biases: list
    dropout_rate: float = 0.0

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ContractViolation("need one bias per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ContractViolation(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ContractViolation(f"layer {i} input does not chain with layer {i - 1}")

    @property
    def spec(self):
        return MlpSpec(self.weights[0].shape[1], tuple(w.shape[0] for w in self.weights[:-1]),
                       self.weights[-1].shape[0], self.dropout_rate)

    def copy(self):
        return copy.deepcopy(self)

    def flat(self):
        return np.concatenate([a.ravel() for pair in zip(self.weights, self.biases) for a in pair])

    def zeros_like(self):
        return MlpParams([np.zeros_like(w) for w in self.weights],
                         [np.zeros_like(b) for b in self.biases], self.dropout_rate)

    @classmethod
    def zeros(cls, spec):
        d = spec.dims
        return cls([np.zeros((d[i + 1], d[i])) for i in range(len(d) - 1)],
                   [np.zeros(d[i + 1]) for i in range(len(d) - 1)], spec.dropout_rate)


def init_params(spec, rng, zero_output=True):
    """He-uniform weights for the ReLU layers, zero biases.

    The output layer starts at zero (``zero_output=True``) so an untrained
    network predicts no error at all rather than a random offset.
    """
    d = spec.dims
    weights, biases = [], []
    for i in range(len(d) - 1):
        fan_in, fan_out = d[i], d[i + 1]
        if i == len(d) - 2 and zero_output:
            weights.append(np.zeros((fan_out, fan_in)))
        else:
            limit = np.sqrt(6.0 / fan_in)
            weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, spec.dropout_rate)


def _check_input(params, x):
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != params.weights[0].shape[1]:
        raise ContractViolation(f"input width {x.shape[1]} != network input {params.weights[0].shape[1]}")
    return x, squeeze


def _forward(params, x, rng=None):
    """Forward pass keeping what backprop needs.  Dropout only when ``rng`` is given."""
    p = params.dropout_rate
    acts, masks = [x], []
    h = x
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        z = h @ w.T + b
        h = np.maximum(z, 0.0)
        if rng is not None and p > 0:
            m = (rng.random(h.shape) >= p) / (1.0 - p)
            h = h * m
        else:
            m = None
        masks.append(m)
        acts.append(h)
    out = h @ params.weights[-1].T + params.biases[-1]
    return out, acts, masks


def forward(params, x, mode="infer", rng=None):
    """Network output for one predictor vector or a batch of them.

    ``mode="train"`` applies inverted dropout (kept activations divided by
    ``1 - p``) and needs ``rng``; ``mode="infer"`` is deterministic.
    """
    if mode not in ("train", "infer"):
        raise ContractViolation(f"unknown mode {mode!r}")
    if mode == "train" and rng is None and params.dropout_rate > 0:
        raise ContractViolation("train mode with dropout needs a random generator")
    x, squeeze = _check_input(params, x)
    out, _, _ = _forward(params, x, rng if mode == "train" else None)
    return out[0] if squeeze else out


def loss_and_gradient(params, x, y, rng=None):
    """Mean squared error over the batch and its exact gradient.

    With ``rng`` the dropout masks are sampled once and the gradient is that
    of the loss under those masks.
    """
    x, _ = _check_input(params, x)
    if x.shape[0] == 0:
        raise ContractViolation("empty batch")
    y = np.asarray(y, dtype=float).reshape(x.shape[0], -1)
    out, acts, masks = _forward(params, x, rng)
    resid = out - y
    mse = float(np.mean(resid ** 2))
    grads = params.zeros_like()
    delta = 2.0 * resid / resid.size
    nl = len(params.weights)
    for i in range(nl - 1, -1, -1):
        grads.weights[i] = delta.T @ acts[i]
        grads.biases[i] = delta.sum(axis=0)
        if i:
            delta = delta @ params.weights[i]
            if masks[i - 1] is not None:
                delta = delta * masks[i - 1]
            delta = delta * (acts[i] > 0)
    return mse, grads


@dataclass
class TrainingSet:
    features: np.ndarray
    targets: np.ndarray
    val_fraction: float = 0.2
    seed: int = 0
    train_idx: np.ndarray = field(init=False)
    val_idx: np.ndarray = field(init=False)

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=float))
        m = self.features.shape[0]
        if m == 0 or self.features.size == 0:
            raise InsufficientSamples("empty training set")
        self.targets = np.asarray(self.targets, dtype=float).reshape(m, -1)
        perm = np.random.default_rng(self.seed).permutation(m)
        nval = int(round(self.val_fraction * m)) if m > 1 else 0
        nval = min(nval, m - 1)
        self.val_idx = np.sort(perm[:nval])
        self.train_idx = np.sort(perm[nval:])

    def __len__(self):
        return self.features.shape[0]


@dataclass
class TrainOptions:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 200
    patience: int = 20
    seed: int = 0
    standardize: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TrainHistory:
    train_mse: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False


class _Adam:
    def __init__(self, params, opts):
        self.o = opts
        self.m = params.zeros_like()
        self.v = params.zeros_like()
        self.t = 0

    def update(self, params, grads):
        o = self.o
        self.t += 1
        c1 = 1.0 - o.beta1 ** self.t
        c2 = 1.0 - o.beta2 ** self.t
        for group in ("weights", "biases"):
            ps, gs = getattr(params, group), getattr(grads, group)
            ms, vs = getattr(self.m, group), getattr(self.v, group)
            for i in range(len(ps)):
                ms[i] = o.beta1 * ms[i] + (1 - o.beta1) * gs[i]
                vs[i] = o.beta2 * vs[i] + (1 - o.beta2) * gs[i] ** 2
                ps[i] = ps[i] - o.learning_rate * (ms[i] / c1) / (np.sqrt(vs[i] / c2) + o.eps)


def _fold_scaling(params, mu_x, sd_x, mu_y, sd_y):
    """Absorb input/output standardization into the first and last layers."""
    out = params.copy()
    w0 = out.weights[0] / sd_x[None, :]
    out.biases[0] = out.biases[0] - w0 @ mu_x
    out.weights[0] = w0
    out.weights[-1] = out.weights[-1] * sd_y[:, None]
    out.biases[-1] = out.biases[-1] * sd_y + mu_y
    return out


def _eval_mse(params, x, y):
    if x.shape[0] == 0:
        return float("nan")
    return float(np.mean((forward(params, x) - y) ** 2))


def train(spec, data, opts=None):
    """Mini-batch Adam on the mean squared error with early stopping.

    Returns the parameters from the epoch with the lowest validation error
    (training error when there is no validation split) and the history.
    Everything is deterministic given ``opts.seed`` and the data.
    """
    opts = opts or TrainOptions()
    if data.features.shape[1] != spec.input_dim or data.targets.shape[1] != spec.output_dim:
        raise ContractViolation("training data does not match the network dimensions")
    rng = np.random.default_rng(opts.seed)
    params = init_params(spec, rng)
    history = TrainHistory()
    if opts.epochs <= 0:
        return params, history

    x, y = data.features, data.targets
    if opts.standardize:
        mu_x, sd_x = x[data.train_idx].mean(0), x[data.train_idx].std(0)
        mu_y, sd_y = y[data.train_idx].mean(0), y[data.train_idx].std(0)
        sd_x = np.where(sd_x > 0, sd_x, 1.0)
        sd_y = np.where(sd_y > 0, sd_y, 1.0)
    else:
        mu_x, sd_x = np.zeros(x.shape[1]), np.ones(x.shape[1])
        mu_y, sd_y = np.zeros(y.shape[1]), np.ones(y.shape[1])
    xs, ys = (x - mu_x) / sd_x, (y - mu_y) / sd_y
    xt, yt = xs[data.train_idx], ys[data.train_idx]
    xv, yv = xs[data.val_idx], ys[data.val_idx]

    adam = _Adam(params, opts)
    best, best_score, since_best = params.copy(), np.inf, 0
    ntrain = xt.shape[0]
    for epoch in range(opts.epochs):
        order = rng.permutation(ntrain)
        for start in range(0, ntrain, opts.batch_size):
            b = order[start:start + opts.batch_size]
            _, grads = loss_and_gradient(params, xt[b], yt[b], rng)
            adam.update(params, grads)
        tr = _eval_mse(params, xt, yt) * float(np.mean(sd_y ** 2))
        va = _eval_mse(params, xv, yv) * float(np.mean(sd_y ** 2))
        history.train_mse.append(tr)
        history.val_mse.append(va)
        score = va if xv.shape[0] else tr
        if not np.isfinite(score):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}", history)
        if score < best_score:
            best, best_score, since_best = params.copy(), score, 0
            history.best_epoch = epoch
        else:
            since_best += 1
            if since_best >= opts.patience:
                history.stopped_early = True
                break
    return _fold_scaling(best, mu_x, sd_x, mu_y, sd_y), history


def increments_to_tendency(delta, nsub, window_length=None):
    """Split an error accumulated over a window into per-sub-window forcing.

    Returns ``(eta, rate)``: ``eta = delta / nsub`` is what
    ``integrate_forced`` adds at each sub-window boundary (so N additions
    accumulate exactly ``delta``); ``rate = delta / window_length`` is the
    per-unit-time form used for display (``None`` when no length is given).
    """
    if nsub < 1:
        raise ContractViolation("number of sub-windows must be >= 1")
    if window_length is not None and not window_length > 0:
        raise ContractViolation("window_length must be positive")
    delta = np.asarray(delta, dtype=float)
    rate = None if window_length is None else delta / window_length
    return delta / nsub, rate


def spectral_truncate(fields, k_max):
    """Keep periodic Fourier wavenumbers ``0..k_max`` along the last axis (0 = no truncation)."""
    a = np.asarray(fields, dtype=float)
    if k_max <= 0:
        return a
    f = np.fft.rfft(a, axis=-1)
    f[..., k_max + 1:] = 0.0
    return np.fft.irfft(f, n=a.shape[-1], axis=-1)


def predictor_frame(background, phase, half_width=2):
    """Predictors for every grid point of one background state.

    Columns: sin/cos of grid location, sin/cos of the cycle phase (a fraction
    of the forcing period), then the background values at offsets
    ``-half_width .. +half_width`` around the point.
    """
    x = np.asarray(background, dtype=float)
    n = x.size
    loc = 2.0 * np.pi * np.arange(n) / n
    ph = 2.0 * np.pi * float(phase)
    cols = [np.sin(loc), np.cos(loc), np.full(n, np.sin(ph)), np.full(n, np.cos(ph))]
    cols += [np.roll(x, -o) for o in range(-half_width, half_width + 1)]
    return np.column_stack(cols)


def n_predictors(half_width=2):
    return 4 + 2 * half_width + 1


def training_set(backgrounds, increments, phases, half_width=2, val_fraction=0.2, seed=0):
    """Stack per-point (predictor, increment) pairs from a sequence of windows."""
    feats = [predictor_frame(xb, ph, half_width) for xb, ph in zip(backgrounds, phases)]
    targets = np.concatenate([np.asarray(d, dtype=float) for d in increments])
    return TrainingSet(np.vstack(feats), targets, val_fraction, seed)


def generate_error_samples(params, frames, nsub):
    """One per-sub-window error-tendency field per predictor frame (infer mode)."""
    samples = []
    for frame in frames:
        delta = forward(params, frame)[:, 0]
        samples.append(increments_to_tendency(delta, nsub)[0])
    if not samples:
        raise InsufficientSamples("empty predictor stream")
    return SampleSet(np.array(samples), "ann")


def save_params(path, params):
    """WERRNN v1: text header with layer dims and dropout, then WERRMAT payloads."""
    spec = params.spec
    header = f"{NN_MAGIC} {NN_VERSION} {len(params.weights)} {' '.join(map(str, spec.dims))} {params.dropout_rate!r}\n"
    body = b"".join(encode_matrix(w) + encode_matrix(b[None, :])
                    for w, b in zip(params.weights, params.biases))
    Path(path).write_bytes(header.encode("ascii") + body)


def load_params(path):
    buf = Path(path).read_bytes()
    end = buf.index(b"\n")
    parts = buf[:end].decode("ascii").split()
    if parts[0] != NN_MAGIC or int(parts[1]) != NN_VERSION:
        raise ContractViolation(f"{path} is not a WERRNN v1 checkpoint")
    nl = int(parts[2])
    dims = [int(v) for v in parts[3:4 + nl]]
    dropout = float(parts[4 + nl])
    off = end + 1
    weights, biases = [], []
    for i in range(nl):
        w, off = decode_matrix(buf, off)
        b, off = decode_matrix(buf, off)
        if w.shape != (dims[i + 1], dims[i]):
            raise ContractViolation(f"layer {i} shape {w.shape} disagrees with header")
        weights.append(w)
        biases.append(b[0])
    return MlpParams(weights, biases, dropout)
