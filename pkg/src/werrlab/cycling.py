"""Twin-experiment driver: truth, synthetic observations and cycled 4D-Var."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .archive import ArchiveWriter, WindowRecord
from .covmodel import CovarianceMatrix, GridMetric, gaussian_correlation
from .dynamics import integrate, integrate_forced
from .errors import ContractViolation, CyclingDiverged, IntegrationBlowup
from .var4d import EtaMask, MinimizeOptions, ObsSet, Priors, debias_forecast, departures, minimize

log = logging.getLogger(__name__)

# independent random streams derived from the experiment seed
STREAM_TRUTH, STREAM_OBS, STREAM_BACKGROUND, STREAM_ENSEMBLE, STREAM_ANN = range(5)


def stream(seed, which):
    return np.random.default_rng([int(seed), which])


@dataclass
class TwinData:
    """Truth at every sub-window boundary and one ObsSet per window."""

    truth: np.ndarray
    obs: list

    @property
    def n_windows(self):
        return len(self.obs)


def observed_indices(cfg):
    return np.arange(cfg.obs.offset % cfg.model.n, cfg.model.n, cfg.obs.stride)


def generate_truth_and_obs(cfg, n_windows=None):
    """Integrate the biased truth model from a spun-up state and sample observations.

    Observations are taken at boundaries ``k = 0, every, ... < N`` of each
    window; the window-end boundary belongs to the next window.
    """
    cfg.validate()
    spec = cfg.truth_spec()
    nw = cfg.assim.windows if n_windows is None else n_windows
    nsub = spec.subwindows_per_window
    rng_t = stream(cfg.seed, STREAM_TRUTH)
    x = np.full(spec.n, spec.forcing) + 0.01 * rng_t.standard_normal(spec.n)
    spin = cfg.truth.spinup_steps
    try:
        x = integrate(x, spec, spin, t0=-spin * spec.dt)
    except IntegrationBlowup as exc:
        raise IntegrationBlowup(f"truth spin-up blew up: {exc}", exc.step, exc.time) from exc
    truth = np.empty((nw * nsub + 1, spec.n))
    truth[0] = x
    for w in range(nw):
        traj = integrate_forced(x, spec, t0=w * spec.window_length)
        truth[w * nsub + 1:(w + 1) * nsub + 1] = traj.states[1:]
        x = traj.final

    rng_o = stream(cfg.seed, STREAM_OBS)
    idx = observed_indices(cfg)
    obs = []
    for w in range(nw):
        indices, values = [], []
        for k in range(nsub + 1):
            if k < nsub and k % cfg.obs.every == 0:
                y = truth[w * nsub + k, idx] + cfg.obs.sigma * rng_o.standard_normal(idx.size)
                indices.append(idx)
                values.append(y)
            else:
                indices.append(np.zeros(0, int))
                values.append(np.zeros(0))
        obs.append(ObsSet(indices, values, cfg.obs.sigma))
    return TwinData(truth, obs)


def background_covariance(cfg):
    """Static B: uniform std times a Gaussian correlation of length ``assim.b_length``."""
    n = cfg.model.n
    corr = gaussian_correlation(GridMetric(n), cfg.assim.b_length) if cfg.assim.b_length > 0 else np.eye(n)
    return CovarianceMatrix(cfg.assim.b_std ** 2 * corr, {"source": "static-gaussian"})


def eta_mask(cfg):
    n = cfg.model.n
    return {"ramp": lambda: EtaMask.ramp(n, cfg.assim.mask_fraction),
            "ones": lambda: EtaMask.ones(n),
            "zeros": lambda: EtaMask.zeros(n)}[cfg.assim.mask]()


def minimize_options(cfg):
    a = cfg.assim
    return MinimizeOptions(outer_loops=a.outer_loops, cg_rtol=a.cg_rtol, max_inner=a.max_inner)


def initial_background(cfg, truth0, B):
    z = stream(cfg.seed, STREAM_BACKGROUND).standard_normal(cfg.model.n)
    return truth0 + B.sqrt @ z


def run_cycle(cfg, twin=None, q=None, path=None):
    """Cycle 4D-Var over ``assim.windows`` contiguous windows.

    In weak-constraint mode (``assim.mode = wc``) ``q`` is the model-error
    covariance; each window's analysis forcing becomes the next window's prior
    forcing and the debiased forecast from the analysis becomes the next
    background.  Non-convergent minimizations are recorded and cycling
    continues; an integration blow-up finishes the archive marked incomplete
    and raises :class:`CyclingDiverged`.
    """
    cfg.validate()
    if not cfg.obs.sigma > 0:
        raise ContractViolation("cycling needs obs.sigma > 0")
    weak = cfg.assim.mode == "wc"
    if weak and q is None:
        raise ContractViolation("weak-constraint cycling needs a Q matrix")
    q_entries = None
    if weak:
        q = q if isinstance(q, CovarianceMatrix) else CovarianceMatrix(q)
        if q.n != cfg.model.n:
            raise ContractViolation("Q dimension does not match the model")
        q_entries = q.entries
    twin = twin if twin is not None else generate_truth_and_obs(cfg)
    nw = cfg.assim.windows
    if twin.n_windows < nw:
        raise ContractViolation(f"twin data covers {twin.n_windows} windows, run needs {nw}")
    spec = cfg.forecast_spec()
    nsub = spec.subwindows_per_window
    B = background_covariance(cfg)
    mask = eta_mask(cfg) if weak else EtaMask.zeros(cfg.model.n)
    opts = minimize_options(cfg)
    writer = ArchiveWriter(cfg, twin.truth[:nw * nsub + 1], path, q_entries)

    xb = initial_background(cfg, twin.truth[0], B) if nw else None
    etab = np.zeros(cfg.model.n)
    for w in range(nw):
        t0 = w * spec.window_length
        obs = twin.obs[w]
        try:
            priors = Priors(xb, B, etab, q if weak else None)
            analysis, diag = minimize(priors, obs, mask, spec, opts, t0)
            traj_b = integrate_forced(xb, spec, mask.active * etab, t0=t0)
            traj_a = debias_forecast(analysis, spec, mask, t0)
        except (IntegrationBlowup, FloatingPointError) as exc:
            writer.finish(complete=False, note=f"diverged in window {w}: {exc}")
            raise CyclingDiverged(f"cycling diverged in window {w}: {exc}", w) from exc
        if not diag.converged:
            log.info("window %d: minimization did not converge (%s)", w, diag.message)
        br = diag.breakdown
        writer.append(WindowRecord(
            w, xb.copy(), analysis.x0, etab.copy(), analysis.eta,
            departures(traj_b, obs), departures(traj_a, obs),
            diag.converged, int(sum(diag.inner_iterations)), br.jb, br.jo, br.jq, list(diag.cost_trace)))
        xb = traj_a.final.copy()
        if weak:
            etab = analysis.eta.copy()
    return writer.finish(complete=True)
