"""Comparison metrics for Q matrices and cycling runs, written as CSV tables.

Every table carries a metric name and units; when written to disk the file
starts with one comment line naming metric, units, run id and config hash.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .archive import as_archive
from .covmodel import GridMetric, correlation_from_covariance, length_scale
from .dynamics import integrate_forced
from .errors import ContractViolation, InsufficientSamples, InsufficientWindows


def header_line(metric, units, run_id="", config_hash=""):
    return f"# metric={metric} units={units} run_id={run_id} config_hash={config_hash}\n"


def parse_header(text):
    first = text.splitlines()[0]
    if not first.startswith("# "):
        raise ContractViolation("CSV has no metadata header")
    return dict(part.split("=", 1) for part in first[2:].split())


def _write_rows(path, metric, units, run_id, config_hash, columns, rows):
    out = io.StringIO()
    out.write(header_line(metric, units, run_id, config_hash))
    w = csv.writer(out, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    text = out.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


@dataclass
class ProfileTable:
    """One value per grid point."""

    metric: str
    units: str
    values: np.ndarray
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)

    def to_csv(self, path=None, run_id="", config_hash=""):
        return _write_rows(path, self.metric, self.units, run_id, config_hash,
                           ["index", self.metric], enumerate(self.values))


# -- covariance structure ----------------------------------------------------

def std_profile(q, nsub=1, window_length=1.0):
    """Square root of the diagonal in display units (per sub-window value * N / window length)."""
    d = np.sqrt(np.clip(q.diagonal if hasattr(q, "diagonal") else np.diag(q), 0.0, None))
    return ProfileTable("std", "per_time", d * nsub / window_length)


def correlation_map(q):
    r = correlation_from_covariance(q)
    return r.entries, r.meta.get("zero_variance") == "1"


@dataclass
class CorrelationRow:
    index: int
    distances: np.ndarray
    values: np.ndarray
    length_scale: float
    crossed: bool


def horizontal_correlation_rows(q, indices, metric=None):
    """Correlation with each reference point versus signed grid distance."""
    r, _ = correlation_map(q)
    n = r.shape[0]
    metric = metric or GridMetric(n)
    half = n // 2
    offsets = np.arange(-half, n - half) if metric.periodic else None
    rows = []
    for i in indices:
        if metric.periodic:
            cols = (i + offsets) % n
            dist = offsets * metric.spacing
        else:
            cols = np.arange(n)
            dist = (cols - i) * metric.spacing
        ls = length_scale(r[i], i, metric)
        rows.append(CorrelationRow(int(i), dist.astype(float), r[i, cols], ls.distance, ls.crossed))
    return rows


def correlation_rows_csv(rows, path=None, run_id="", config_hash=""):
    table = [(row.index, d, v, row.length_scale) for row in rows for d, v in zip(row.distances, row.values)]
    return _write_rows(path, "correlation", "1", run_id, config_hash,
                       ["index", "distance", "correlation", "length_scale"], table)


# -- cycling-run statistics --------------------------------------------------

def _post_spinup(run, spinup):
    run = as_archive(run)
    spinup = run.config.assim.spinup_windows if spinup is None else spinup
    return run, spinup


def increment_stats(run, spinup=None):
    """Time-mean and time-rms of analysis minus background at every grid point."""
    run, spinup = _post_spinup(run, spinup)
    inc = run.increments[spinup:]
    if inc.shape[0] < 2:
        raise InsufficientWindows(f"{inc.shape[0]} windows after spin-up; need at least 2")
    mean = ProfileTable("mean_increment", "state", inc.mean(axis=0))
    rms = ProfileTable("rms_increment", "state", np.sqrt(np.mean(inc ** 2, axis=0)))
    return mean, rms


@dataclass
class DepartureCell:
    group: str
    quantity: str
    mean: float
    rms: float
    count: int


@dataclass
class DepartureStats:
    cells: list

    def cell(self, group, quantity):
        for c in self.cells:
            if c.group == group and c.quantity == quantity:
                return c
        raise KeyError((group, quantity))

    def to_csv(self, path=None, run_id="", config_hash=""):
        return _write_rows(path, "departures", "state", run_id, config_hash,
                           ["group", "quantity", "mean", "rms", "count"],
                           [(c.group, c.quantity, c.mean, c.rms, c.count) for c in self.cells])


def _grouped(values, groups):
    cells = []
    for name, idx in groups.items():
        v = values[..., np.asarray(idx, dtype=int)]
        v = v[np.isfinite(v)]
        if v.size == 0:
            raise ContractViolation(f"observation group {name!r} has no departures")
        cells.append((name, float(v.mean()), float(np.sqrt(np.mean(v ** 2))), int(v.size)))
    return cells


def departure_stats(run, groups=None, spinup=None):
    """Mean and rms of O-B and O-A per group of grid indices (default: one group, all points)."""
    run, spinup = _post_spinup(run, spinup)
    groups = groups or {"all": np.arange(run.config.model.n)}
    cells = []
    for qty, arr in (("O-B", run.omb[spinup:]), ("O-A", run.oma[spinup:])):
        cells += [DepartureCell(g, qty, m, r, c) for g, m, r, c in _grouped(arr, groups)]
    return DepartureStats(cells)


def departure_ratios(experiment, control):
    """rms(experiment) / rms(control) * 100 per (group, quantity)."""
    out = {}
    for c in control.cells:
        e = experiment.cell(c.group, c.quantity)
        out[(c.group, c.quantity)] = 100.0 * e.rms / c.rms if c.rms > 0 else (100.0 if e.rms == 0 else np.inf)
    return out


def ratio_table_csv(ratios, path=None, run_id="", config_hash=""):
    return _write_rows(path, "departure_rms_ratio", "percent", run_id, config_hash,
                       ["group", "quantity", "ratio"], [(g, q, v) for (g, q), v in ratios.items()])


@dataclass
class SkillCurve:
    label: str
    leads: np.ndarray
    rmse: np.ndarray

    def to_csv(self, path=None, run_id="", config_hash=""):
        return _write_rows(path, f"forecast_rmse_{self.label}", "state", run_id, config_hash,
                           ["lead", "rmse"], zip(self.leads, self.rmse))


def forecast_skill(run, leads, kind="free", spinup=None):
    """RMSE against truth versus lead (in sub-windows), averaged over launch windows.

    ``kind`` selects the forecast launched from each analysis: ``free``
    (unforced model), ``debiased`` (the window's analysis forcing kept on
    through the forecast) or ``persistence`` (the analysis held fixed).
    """
    if kind not in ("free", "debiased", "persistence"):
        raise ContractViolation(f"unknown forecast kind {kind!r}")
    run, spinup = _post_spinup(run, spinup)
    leads = np.asarray(leads, dtype=int)
    if leads.size == 0 or np.any(np.diff(leads) <= 0) or leads[0] < 0:
        raise ContractViolation("leads must be non-negative and strictly increasing")
    cfg = run.config
    spec = cfg.forecast_spec()
    nsub = spec.subwindows_per_window
    span = run.truth.shape[0] - 1
    launches = [w for w in range(spinup, run.n_windows) if w * nsub + leads[-1] <= span]
    if not launches:
        raise ContractViolation(f"lead {leads[-1]} reaches beyond the archived truth")
    from .cycling import eta_mask

    mask = eta_mask(cfg).active if cfg.assim.mode == "wc" else np.zeros(cfg.model.n)
    lead_spec = spec.with_(subwindows_per_window=int(leads[-1])) if leads[-1] > 0 else None
    sq = np.zeros(leads.size)
    for w in launches:
        rec = run.records[w]
        if kind == "persistence" or lead_spec is None:
            fc = np.tile(rec.xa, (leads[-1] + 1, 1))
        else:
            eta = mask * rec.eta if kind == "debiased" else None
            fc = integrate_forced(rec.xa, lead_spec, eta, t0=w * spec.window_length).states
        truth = run.truth[w * nsub + leads]
        sq += np.mean((fc[leads] - truth) ** 2, axis=1)
    return SkillCurve(kind, leads, np.sqrt(sq / len(launches)))


def relative_skill(experiment, control):
    """(control RMSE - experiment RMSE) / control RMSE; positive means the experiment is better."""
    if not np.array_equal(experiment.leads, control.leads):
        raise ContractViolation("skill curves have different leads")
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = (control.rmse - experiment.rmse) / control.rmse
    return np.where(control.rmse == experiment.rmse, 0.0, rel)


@dataclass
class EtaVariability:
    ratio: np.ndarray
    excluded: np.ndarray
    median: float
    undefined: bool

    def table(self):
        return ProfileTable("eta_std_over_abs_mean", "1", np.where(self.excluded, np.nan, self.ratio),
                            {"median": self.median, "undefined": self.undefined})


def eta_variability(run_or_eta, spinup=None, tol=1e-8):
    """Per-point std-over-time / |mean-over-time| of the analysis forcing and its domain median."""
    if isinstance(run_or_eta, np.ndarray):
        eta = run_or_eta[spinup or 0:]
    else:
        run, spinup = _post_spinup(run_or_eta, spinup)
        eta = run.eta[spinup:]
    if eta.shape[0] < 2:
        raise InsufficientSamples(f"{eta.shape[0]} forcing samples; need at least 2")
    mean = np.abs(eta.mean(axis=0))
    std = eta.std(axis=0, ddof=1)
    excluded = mean < tol
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(excluded, np.nan, std / np.where(excluded, 1.0, mean))
    undefined = bool(np.all(excluded))
    med = float("nan") if undefined else float(np.median(ratio[~excluded]))
    return EtaVariability(ratio, excluded, med, undefined)
