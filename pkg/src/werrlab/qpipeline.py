"""Model-error covariance (Q) construction.

Five recipes, all returning a :class:`CovarianceMatrix` in per-sub-window
forcing units with provenance in its ``meta``:

``pred``
    spread of a stochastic-physics ensemble launched from identical states;
``oper``
    climatology of the forcing estimated by a weak-constraint cycle that used
    ``pred``, localized and with its standard deviations halved;
``ann``
    covariance of error samples drawn from the trained emulator, localized;
``increment_climatology``
    covariance of strong-constraint analysis increments (a negative control);
``daley``
    the residual ``P_b - M P_a M^T`` on a linear test system.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .archive import as_archive
from .covmodel import (
    CovarianceMatrix,
    GridMetric,
    SampleSet,
    TaperSpec,
    ensure_psd,
    localize,
    sample_covariance,
    scale_std,
)
from .cycling import generate_truth_and_obs, run_cycle
from .dynamics import SPPTPerturber, integrate_forced, tangent_linear
from .errors import ContractViolation, InsufficientSamples
from .matio import read_kv, save_covariance, write_kv
from .neuralerr import (
    MlpSpec,
    TrainOptions,
    generate_error_samples,
    n_predictors,
    predictor_frame,
    spectral_truncate,
    train,
    training_set,
)

log = logging.getLogger(__name__)

KINDS = ("pred", "oper", "ann", "increment_climatology", "daley")
OPER_STD_SCALE = 0.5
MIN_OPER_WINDOWS = 50


@dataclass
class QRecipe:
    kind: str
    sources: str = ""
    taper: TaperSpec | None = None
    std_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractViolation(f"unknown Q recipe {self.kind!r}")
        if not self.std_scale > 0:
            raise ContractViolation("std_scale must be positive")

    def to_meta(self):
        m = {"recipe": self.kind, "std_scale": repr(float(self.std_scale))}
        if self.sources:
            m["sources"] = self.sources
        if self.taper is not None:
            t = self.taper
            m.update({"taper.d0": repr(t.d0), "taper.d1": repr(t.d1),
                      "taper.vertical_halfwidth": repr(t.vertical_halfwidth), "taper.mode": t.mode})
        return m

    @classmethod
    def from_meta(cls, meta):
        taper = None
        if "taper.mode" in meta:
            taper = TaperSpec(float(meta["taper.d0"]), float(meta["taper.d1"]),
                              float(meta["taper.vertical_halfwidth"]), meta["taper.mode"])
        return cls(meta["recipe"], meta.get("sources", ""), taper, float(meta.get("std_scale", 1.0)))

    def save(self, path):
        write_kv(path, self.to_meta())

    @classmethod
    def load(cls, path):
        return cls.from_meta(read_kv(path))


def _finish(c, recipe, **extra):
    """Final PSD repair plus provenance."""
    out = ensure_psd(c)
    meta = dict(c.meta)
    meta.update(out.meta)
    meta.update(recipe.to_meta())
    meta.update({k: str(v) for k, v in extra.items()})
    if not np.any(out.entries):
        meta["degenerate"] = "1"
    return CovarianceMatrix(out.entries, meta)


def save_q(path, q):
    """Matrix plus its key=value sidecar (the recipe and provenance)."""
    save_covariance(Path(path), q, sidecar=True)


def pred_samples(ens_size, spec, x0, rng, t0=0.0):
    """Window-end member deviations from the ensemble mean, divided by N.

    ``x0`` may be a single state or a stack of launch states; every launch
    runs ``ens_size`` members from the identical state and deviations are
    taken from that launch's own mean.
    """
    if ens_size < 2:
        raise ContractViolation("ensemble needs at least 2 members")
    launches = np.atleast_2d(np.asarray(x0, dtype=float))
    t0s = np.broadcast_to(np.asarray(t0, dtype=float), (launches.shape[0],))
    perturber = SPPTPerturber(spec, rng)
    out = []
    for x, t in zip(launches, t0s):
        members = np.tile(x, (ens_size, 1))
        final = integrate_forced(members, spec, perturber=perturber, t0=float(t)).final
        out.append(final - final.mean(axis=0))
    return np.vstack(out) / spec.subwindows_per_window


def build_q_pred(ens_size, spec, x0, rng, t0=0.0):
    """Q from a predictability ensemble (stochastic physics, no initial perturbations)."""
    samples = pred_samples(ens_size, spec, x0, rng, t0)
    c = sample_covariance(SampleSet(samples, "pred"))
    recipe = QRecipe("pred", f"sppt={spec.sppt_amplitude!r} corr_len={spec.sppt_corr_len!r}")
    extra = {"ens_size": ens_size, "launches": np.atleast_2d(x0).shape[0]}
    if spec.sppt_amplitude == 0:
        log.warning("stochastic perturbations are off: the ensemble has no spread")
    return _finish(c, recipe, **extra)


def build_q_pred_for(cfg, twin=None):
    """Q_pred for an experiment: launches at evenly spaced windows of the truth run."""
    twin = twin if twin is not None else generate_truth_and_obs(cfg)
    nsub = cfg.model.subwindows_per_window
    nw = twin.n_windows
    if nw == 0:
        raise InsufficientSamples("no truth windows to launch the ensemble from")
    wins = np.unique(np.linspace(0, nw - 1, cfg.sppt.launches).astype(int))
    spec = cfg.sppt_spec()
    from .cycling import STREAM_ENSEMBLE, stream

    return build_q_pred(cfg.sppt.ens_size, spec, twin.truth[wins * nsub], stream(cfg.seed, STREAM_ENSEMBLE),
                        wins * spec.window_length)


def taper_for(cfg):
    t = cfg.taper
    return TaperSpec(t.d0, t.d1, t.vertical_halfwidth, t.mode)


def eta_samples(run, spinup=None):
    """Per-window analysis forcing after spin-up, as a SampleSet."""
    run = as_archive(run)
    spinup = run.config.assim.spinup_windows if spinup is None else spinup
    eta = run.eta[spinup:]
    if eta.shape[0] < 2:
        raise InsufficientSamples(f"{eta.shape[0]} post-spin-up windows; need at least 2")
    return SampleSet(eta, "eta")


def build_q_oper(q_pred, cfg, twin=None, path=None):
    """Bootstrap Q from forcing estimates of one weak-constraint cycle run with ``q_pred``.

    The bootstrap is deliberately a single pass.  Returns ``(Q_oper, archive)``.
    """
    if cfg.assim.windows - cfg.assim.spinup_windows < MIN_OPER_WINDOWS:
        raise ContractViolation(f"the bootstrap needs at least {MIN_OPER_WINDOWS} post-spin-up windows")
    wc = cfg.with_(**{"assim.mode": "wc"})
    run = run_cycle(wc, twin, q_pred, path)
    return q_oper_from_run(run), run


def q_oper_from_run(run, taper=None):
    run = as_archive(run)
    cfg = run.config
    taper = taper or taper_for(cfg)
    raw = sample_covariance(eta_samples(run))
    loc = localize(raw, taper, GridMetric(cfg.model.n))
    out = scale_std(loc, OPER_STD_SCALE)
    recipe = QRecipe("oper", run.run_id, taper, OPER_STD_SCALE)
    return _finish(out, recipe, samples=run.n_windows - cfg.assim.spinup_windows)


def window_phase(cfg, w):
    """Fraction of the forcing-modulation period at the start of window ``w``."""
    t = w * cfg.forecast_spec().window_length
    return (t / cfg.truth.modulation_period) % 1.0


def predictor_stream(run, windows=None):
    """One predictor frame per archived window background (truncated like the training data)."""
    run = as_archive(run)
    cfg = run.config
    xb = spectral_truncate(run.xb, cfg.ann.truncation)
    windows = range(xb.shape[0]) if windows is None else windows
    return [predictor_frame(xb[w], window_phase(cfg, w), cfg.ann.half_width) for w in windows]


def emulator_training_set(run, spinup=None):
    """(predictors, increment) pairs from a strong-constraint archive.

    Both the backgrounds and the increments are spectrally truncated to
    ``ann.truncation`` wavenumbers, so the emulator learns from a
    low-resolution view of the analysis increments.
    """
    run = as_archive(run)
    cfg = run.config
    spinup = cfg.assim.spinup_windows if spinup is None else spinup
    if run.n_windows - spinup < 1:
        raise InsufficientSamples("no post-spin-up windows to train on")
    k = cfg.ann.truncation
    wins = range(spinup, run.n_windows)
    return training_set(spectral_truncate(run.xb[spinup:], k), spectral_truncate(run.increments[spinup:], k),
                        [window_phase(cfg, w) for w in wins], cfg.ann.half_width,
                        cfg.ann.val_fraction, cfg.seed)


def train_emulator(run, spinup=None):
    """Fit the error emulator to an archived run; returns ``(params, history)``."""
    run = as_archive(run)
    a = run.config.ann
    data = emulator_training_set(run, spinup)
    spec = MlpSpec(n_predictors(a.half_width), a.hidden_widths, 1, a.dropout)
    opts = TrainOptions(a.learning_rate, a.batch_size, a.epochs, a.patience, run.config.seed)
    return train(spec, data, opts)


def build_q_ann(params, run, taper=None):
    """Q from emulator samples over the backgrounds of an archived run."""
    run = as_archive(run)
    cfg = run.config
    frames = predictor_stream(run)
    if len(frames) < 2:
        raise InsufficientSamples(f"{len(frames)} predictor frames; need at least 2")
    samples = generate_error_samples(params, frames, cfg.model.subwindows_per_window)
    raw = sample_covariance(samples)
    if taper is not None:
        raw = localize(raw, taper, GridMetric(cfg.model.n))
    return _finish(raw, QRecipe("ann", run.run_id, taper), samples=samples.size)


def increment_samples(run, spinup=None):
    run = as_archive(run)
    spinup = run.config.assim.spinup_windows if spinup is None else spinup
    inc = run.increments[spinup:] / run.config.model.subwindows_per_window
    if inc.shape[0] < 2:
        raise InsufficientSamples(f"{inc.shape[0]} increments; need at least 2")
    return SampleSet(inc, "increment")


def build_q_increment_climatology(run, taper=None, spinup=None):
    run = as_archive(run)
    raw = sample_covariance(increment_samples(run, spinup))
    if taper is not None:
        raw = localize(raw, taper, GridMetric(run.config.model.n))
    return _finish(raw, QRecipe("increment_climatology", run.run_id, taper))


def build_q_daley(spec, q_true, sample_count, rng, pa=None):
    """Estimate Q from ``P_b = M P_a M^T + Q`` on a linear test system.

    Analysis errors are drawn from the known ``pa`` (identity by default),
    propagated over one window and hit by a model-error draw from ``q_true``
    at the window end.  ``P_b`` is the Monte Carlo covariance of the
    resulting forecast errors; ``M P_a M^T`` is formed exactly from
    tangent-linear columns.
    """
    if spec.linear_op is None:
        raise ContractViolation("the residual estimator needs a linear test system")
    n = spec.n
    q_true = np.asarray(q_true.entries if isinstance(q_true, CovarianceMatrix) else q_true, dtype=float)
    pa = np.eye(n) if pa is None else np.asarray(pa.entries if isinstance(pa, CovarianceMatrix) else pa)
    la = CovarianceMatrix(pa).sqrt
    lq = CovarianceMatrix(q_true).sqrt
    if sample_count < 2:
        raise InsufficientSamples("need at least 2 forecast samples")

    base = integrate_forced(np.zeros(n), spec)
    mla = tangent_linear(base, la.T, np.zeros((n, n)))[-1].T   # columns M L_a
    mpam = mla @ mla.T

    ea = rng.standard_normal((sample_count, n)) @ la.T
    q = rng.standard_normal((sample_count, n)) @ lq.T
    eb = integrate_forced(ea, spec).final - base.final + q
    pb = sample_covariance(SampleSet(eb, "increment"))
    resid = CovarianceMatrix(pb.entries - mpam)
    extra = {"samples": sample_count}
    if sample_count < n:
        extra["ill_conditioned"] = 1
    return _finish(resid, QRecipe("daley"), **extra)
