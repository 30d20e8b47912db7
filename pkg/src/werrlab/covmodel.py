"""Dense covariance algebra: estimation, localization, PSD repair, factors."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ContractViolation, InsufficientSamples, NotPositiveSemiDefinite, NumericalError

SAMPLE_LABELS = ("pred", "eta", "ann", "increment")


class CovarianceMatrix:
    """Symmetric matrix with a lazily computed, cached square-root factor.

    The entries are symmetrized on construction and frozen.  ``meta`` carries
    free-form provenance (recipe name, flags) as string key/value pairs.
    """

    def __init__(self, entries, meta=None):
        a = np.array(entries, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ContractViolation(f"covariance must be square, got shape {a.shape}")
        a = 0.5 * (a + a.T)
        a.setflags(write=False)
        self.entries = a
        self.meta = dict(meta or {})
        self._sqrt = None
        self._lock = threading.Lock()

    @property
    def n(self):
        return self.entries.shape[0]

    @property
    def diagonal(self):
        return np.diag(self.entries)

    @property
    def sqrt(self):
        with self._lock:
            if self._sqrt is None:
                self._sqrt = sqrt_factor(self)
                self._sqrt.setflags(write=False)
            return self._sqrt

    def with_meta(self, **extra):
        return CovarianceMatrix(self.entries, {**self.meta, **{k: str(v) for k, v in extra.items()}})

    def __array__(self, dtype=None, copy=None):
        return self.entries if dtype is None else self.entries.astype(dtype)

    def __repr__(self):
        kind = self.meta.get("kind", "")
        return f"CovarianceMatrix(n={self.n}{', kind=' + kind if kind else ''})"


def _entries(c):
    return c.entries if isinstance(c, CovarianceMatrix) else np.asarray(c, dtype=float)


@dataclass
class SampleSet:
    samples: np.ndarray
    label: str = "eta"

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim == 1:
            s = s[None, :]
        if s.ndim != 2:
            raise ContractViolation("samples must be an (m, n) array")
        self.samples = s
        if self.label not in SAMPLE_LABELS:
            raise ContractViolation(f"unknown sample label {self.label!r}")

    @property
    def size(self):
        return self.samples.shape[0]

    @property
    def dim(self):
        return self.samples.shape[1]

    @property
    def sufficient(self):
        return self.size >= 2


def sample_covariance(s):
    """Unbiased covariance of the samples about their mean (divisor m - 1)."""
    if not isinstance(s, SampleSet):
        s = SampleSet(s)
    if not s.sufficient:
        raise InsufficientSamples(f"need at least 2 samples, got {s.size}")
    dev = s.samples - s.samples.mean(axis=0)
    return CovarianceMatrix(dev.T @ dev / (s.size - 1),
                            {"source": s.label, "samples": str(s.size)})


@dataclass(frozen=True)
class GridMetric:
    """Distances on the (by default periodic) 1-D model grid."""

    n: int
    spacing: float = 1.0
    periodic: bool = True

    def index_distance(self, i, j):
        d = np.abs(np.asarray(i) - np.asarray(j))
        if self.periodic:
            d = np.minimum(d, self.n - d)
        return d

    def distance(self, i, j):
        return self.spacing * self.index_distance(i, j)

    def distance_matrix(self):
        i = np.arange(self.n)
        return self.distance(i[:, None], i[None, :])

    @property
    def max_distance(self):
        return self.spacing * (self.n // 2 if self.periodic else self.n - 1)


@dataclass(frozen=True)
class TaperSpec:
    """Cosine taper between ``d0`` and ``d1`` and/or quadratic taper of scale ``L``."""

    d0: float = 6.0
    d1: float = 10.0
    vertical_halfwidth: float = 12.0
    mode: str = "both"

    def __post_init__(self):
        if not 0 <= self.d0 < self.d1:
            raise ContractViolation(f"need 0 <= d0 < d1, got d0={self.d0}, d1={self.d1}")
        if not self.vertical_halfwidth > 0:
            raise ContractViolation("vertical_halfwidth must be positive")
        if self.mode not in ("horizontal", "vertical", "both"):
            raise ContractViolation(f"unknown taper mode {self.mode!r}")

    def weights(self, distance):
        w = np.ones_like(np.asarray(distance, dtype=float))
        if self.mode in ("horizontal", "both"):
            w = w * cosine_taper(distance, self.d0, self.d1)
        if self.mode in ("vertical", "both"):
            w = w * quadratic_taper(distance, self.vertical_halfwidth)
        return w


def cosine_taper(d, d0, d1):
    """1 up to ``d0``, raised-cosine decay to 0 at ``d1``, 0 beyond."""
    if not 0 <= d0 < d1:
        raise ContractViolation(f"need 0 <= d0 < d1, got d0={d0}, d1={d1}")
    d = np.asarray(d, dtype=float)
    x = np.clip((d - d0) / (d1 - d0), 0.0, 1.0)
    w = 0.5 * (1.0 + np.cos(np.pi * x))
    w = np.where(d <= d0, 1.0, np.where(d >= d1, 0.0, w))
    return w if w.ndim else float(w)


def quadratic_taper(delta, L):
    if not L > 0:
        raise ContractViolation("L must be positive")
    w = np.maximum(0.0, 1.0 - (np.asarray(delta, dtype=float) / L) ** 2)
    return w if w.ndim else float(w)


def taper_matrix(taper, metric):
    return taper.weights(metric.distance_matrix())


def localize(c, taper, metric):
    """Schur product with the taper matrix, followed by PSD repair.

    The taper matrix of a distance-based weight function need not be PSD, so
    the product is passed through :func:`ensure_psd`.  Clipping negative
    eigenvalues moves the diagonal; a diagonal congruence then restores the
    original variances, so localization only ever changes correlations.
    """
    a = _entries(c)
    if a.shape[0] != metric.n:
        raise ContractViolation(f"matrix dimension {a.shape[0]} does not match grid size {metric.n}")
    t = taper_matrix(taper, metric)
    out = ensure_psd(CovarianceMatrix(a * t))
    target = np.diag(a * t)
    got = np.diag(out.entries)
    if not np.array_equal(got, target):
        scale = np.ones_like(got)
        ok = got > 0
        scale[ok] = np.sqrt(target[ok] / got[ok])
        fixed = out.entries * scale[:, None] * scale[None, :]
        fixed = 0.5 * (fixed + fixed.T)
        np.fill_diagonal(fixed, target)
        out = CovarianceMatrix(fixed, out.meta)
    meta = dict(getattr(c, "meta", {}))
    meta.update(out.meta)
    meta.update(taper_d0=repr(taper.d0), taper_d1=repr(taper.d1),
                taper_L=repr(taper.vertical_halfwidth), taper_mode=taper.mode)
    return CovarianceMatrix(out.entries, meta)


def ensure_psd(c, floor=0.0):
    """Clip eigenvalues below ``floor * lambda_max`` and reassemble.

    Matrices that need no clipping are returned unchanged.
    """
    if floor < 0:
        raise ContractViolation("floor must be >= 0")
    a = _entries(c)
    meta = dict(getattr(c, "meta", {}))
    try:
        w, v = np.linalg.eigh(a)
    except np.linalg.LinAlgError as exc:
        with np.errstate(all="ignore"):
            cond = np.linalg.cond(a)
        raise NumericalError(f"eigendecomposition failed (condition number {cond:.3e})") from exc
    lam_max = max(float(w[-1]), 0.0)
    thresh = floor * lam_max
    low = w < thresh
    if not np.any(low):
        return c if isinstance(c, CovarianceMatrix) else CovarianceMatrix(a, meta)
    w = np.where(low, thresh, w)
    meta["psd_clipped"] = str(int(low.sum()))
    return CovarianceMatrix((v * w) @ v.T, meta)


def min_eigen_ratio(c):
    """Smallest eigenvalue relative to the largest (0 for the zero matrix)."""
    w = np.linalg.eigvalsh(_entries(c))
    return 0.0 if w[-1] <= 0 else float(w[0] / w[-1])


def scale_std(c, factor):
    """Scale every standard deviation by ``factor`` (correlations unchanged)."""
    if not factor > 0:
        raise ContractViolation("factor must be positive")
    meta = dict(getattr(c, "meta", {}))
    meta["std_scale"] = repr(float(factor))
    return CovarianceMatrix(factor * factor * _entries(c), meta)


def sqrt_factor(c, rtol=1e-12):
    """Lower-triangular ``L`` with ``L L^T = C``.

    Singular PSD matrices get a tiny diagonal shift before Cholesky so the
    reconstruction error stays below 1e-8 relative.  Indefinite input raises.
    """
    a = _entries(c)
    n = a.shape[0]
    if not np.any(a):
        return np.zeros_like(a)
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        pass
    w = np.linalg.eigvalsh(a)
    if w[0] < -rtol * max(w[-1], 0.0):
        raise NotPositiveSemiDefinite(
            f"matrix is indefinite (min/max eigenvalue {w[0]:.3e}/{w[-1]:.3e}); call ensure_psd first")
    shift = 1e-10 * w[-1] / max(n, 1) ** 0.5
    for _ in range(8):
        try:
            return np.linalg.cholesky(a + shift * np.eye(n))
        except np.linalg.LinAlgError:
            shift *= 10
    raise NumericalError("regularized Cholesky failed")


def correlation_from_covariance(c):
    a = _entries(c)
    d = np.diag(a).copy()
    dead = d < 1e-300
    s = np.sqrt(np.where(dead, 1.0, d))
    r = a / s[:, None] / s[None, :]
    r[dead, :] = 0.0
    r[:, dead] = 0.0
    np.fill_diagonal(r, 1.0)
    meta = dict(getattr(c, "meta", {}))
    if np.any(dead):
        meta["zero_variance"] = " ".join(str(i) for i in np.flatnonzero(dead))
    return CovarianceMatrix(np.clip(r, -1.0, 1.0), meta)


class LengthScale(NamedTuple):
    distance: float
    crossed: bool


def length_scale(corr_row, center, metric=None):
    """Distance at which a correlation function first drops below 0.5.

    The row is symmetrized about ``center`` on the periodic grid (mean of the
    two sides at each separation) and the crossing is linearly interpolated.
    If the correlation never drops below 0.5 the maximum grid distance is
    returned with ``crossed=False``.
    """
    r = np.asarray(corr_row, dtype=float)
    n = r.size
    metric = metric or GridMetric(n)
    h = metric.spacing
    if metric.periodic:
        seps = np.arange(0, n // 2 + 1)
        prof = 0.5 * (r[(center + seps) % n] + r[(center - seps) % n])
    else:
        seps = np.arange(0, n)
        right = np.array([r[center + s] if center + s < n else np.nan for s in seps])
        left = np.array([r[center - s] if center - s >= 0 else np.nan for s in seps])
        prof = np.nanmean(np.vstack([left, right]), axis=0)
        keep = ~np.isnan(prof)
        seps, prof = seps[keep], prof[keep]
    prof[0] = 1.0
    below = np.flatnonzero(prof < 0.5)
    if below.size == 0:
        return LengthScale(h * float(seps[-1]), False)
    k = below[0]
    if k == 1:
        return LengthScale(0.0, True)
    c0, c1 = prof[k - 1], prof[k]
    frac = (c0 - 0.5) / (c0 - c1)
    return LengthScale(h * float(seps[k - 1] + frac), True)


def length_scales(c, metric=None):
    """Length scale at every grid point of a covariance or correlation matrix."""
    r = correlation_from_covariance(c).entries
    metric = metric or GridMetric(r.shape[0])
    return np.array([length_scale(r[i], i, metric).distance for i in range(r.shape[0])])


def gaussian_correlation(metric, ell):
    d = metric.distance_matrix()
    if ell == 0:
        return np.eye(metric.n)
    return np.exp(-0.5 * (d / ell) ** 2)
