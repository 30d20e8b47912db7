"""Run archives.

A run directory holds

``manifest.kv``
    flat key=value: run id, mode, dimensions, completeness flag, config hash,
    content hash, package version.
``config.kv``
    the full experiment configuration snapshot.
``truth.bin``
    WERRMAT matrix of truth states at every sub-window boundary.
``windows.bin``
    append-only sequence of fixed-size frames, one per window.  A frame is two
    WERRMAT payloads: a ``(4 + 2 (N+1), n)`` state block (background x0,
    analysis x0, prior eta, analysis eta, O-B and O-A at every boundary with
    NaN where unobserved) followed by a ``(1, 6 + outer_loops + 1)`` scalar
    block (window index, converged flag, inner iterations, Jb, Jo, Jq, and the
    outer-loop cost trace padded with NaN).
``q.werrmat``
    the model-error covariance used by a weak-constraint run, if any.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig
from .errors import ContractViolation
from .matio import decode_matrix, encode_matrix, read_kv, read_matrix, write_kv, write_matrix

WINDOWS_FILE = "windows.bin"
TRUTH_FILE = "truth.bin"
CONFIG_FILE = "config.kv"
MANIFEST_FILE = "manifest.kv"
Q_FILE = "q.werrmat"
_HASHED = (CONFIG_FILE, TRUTH_FILE, WINDOWS_FILE, Q_FILE)
N_SCALARS = 6


@dataclass
class WindowRecord:
    index: int
    xb: np.ndarray
    xa: np.ndarray
    etab: np.ndarray
    eta: np.ndarray
    omb: np.ndarray
    oma: np.ndarray
    converged: bool = True
    inner_iterations: int = 0
    jb: float = 0.0
    jo: float = 0.0
    jq: float = 0.0
    cost_trace: list = field(default_factory=list)

    @property
    def increment(self):
        return self.xa - self.xb

    def encode(self, outer_loops):
        block = np.vstack([self.xb, self.xa, self.etab, self.eta, self.omb, self.oma])
        trace = np.full(outer_loops + 1, np.nan)
        trace[:min(len(self.cost_trace), outer_loops + 1)] = self.cost_trace[:outer_loops + 1]
        scalars = np.concatenate([[self.index, float(self.converged), self.inner_iterations,
                                   self.jb, self.jo, self.jq], trace])
        return encode_matrix(block) + encode_matrix(scalars[None, :])

    @classmethod
    def decode(cls, buf, offset, nsub):
        block, offset = decode_matrix(buf, offset)
        scalars, offset = decode_matrix(buf, offset)
        nb = nsub + 1
        s = scalars[0]
        trace = [float(v) for v in s[N_SCALARS:] if np.isfinite(v)]
        rec = cls(int(s[0]), block[0], block[1], block[2], block[3],
                  block[4:4 + nb], block[4 + nb:4 + 2 * nb],
                  bool(s[1]), int(s[2]), float(s[3]), float(s[4]), float(s[5]), trace)
        return rec, offset


@dataclass
class RunArchive:
    """Everything a cycling run produced, held in memory.

    Per-window arrays are stacked along the first axis: ``xb``, ``xa``,
    ``etab`` and ``eta`` are ``(W, n)``; ``omb`` and ``oma`` are
    ``(W, N+1, n)``.
    """

    config: ExperimentConfig
    truth: np.ndarray
    records: list = field(default_factory=list)
    complete: bool = True
    q: np.ndarray | None = None
    path: Path | None = None

    @property
    def run_id(self):
        return self.config.run_id

    @property
    def config_hash(self):
        return self.config.hash

    @property
    def n_windows(self):
        return len(self.records)

    def _stack(self, name):
        n = self.config.model.n
        if not self.records:
            nb = self.config.model.subwindows_per_window + 1
            return np.zeros((0, nb, n)) if name in ("omb", "oma") else np.zeros((0, n))
        return np.array([getattr(r, name) for r in self.records])

    xb = property(lambda self: self._stack("xb"))
    xa = property(lambda self: self._stack("xa"))
    etab = property(lambda self: self._stack("etab"))
    eta = property(lambda self: self._stack("eta"))
    omb = property(lambda self: self._stack("omb"))
    oma = property(lambda self: self._stack("oma"))

    @property
    def increments(self):
        return self.xa - self.xb

    @property
    def converged(self):
        return np.array([r.converged for r in self.records], dtype=bool)

    def window_start(self, w):
        return w * self.config.forecast_spec().window_length

    def truth_at_window(self, w):
        return self.truth[w * self.config.model.subwindows_per_window]

    def content_hash(self):
        if self.path is not None:
            return content_hash(self.path)
        h = hashlib.sha256()
        h.update(self.config.to_text().encode())
        h.update(encode_matrix(self.truth))
        outer = self.config.assim.outer_loops
        for r in self.records:
            h.update(r.encode(outer))
        if self.q is not None:
            h.update(encode_matrix(self.q))
        return h.hexdigest()


class ArchiveWriter:
    """Streams window records to a run directory (or only to memory when ``path`` is None)."""

    def __init__(self, config, truth, path=None, q=None):
        self.archive = RunArchive(config, np.asarray(truth, dtype=float), [], False,
                                  None if q is None else np.asarray(q, dtype=float),
                                  None if path is None else Path(path))
        self._outer = config.assim.outer_loops
        p = self.archive.path
        if p is not None:
            if (p / MANIFEST_FILE).exists() and read_kv(p / MANIFEST_FILE).get("complete") == "1":
                raise ContractViolation(f"{p} holds a finished run; archives are immutable")
            p.mkdir(parents=True, exist_ok=True)
            config.save(p / CONFIG_FILE)
            write_matrix(p / TRUTH_FILE, self.archive.truth)
            if q is not None:
                write_matrix(p / Q_FILE, self.archive.q)
            elif (p / Q_FILE).exists():
                (p / Q_FILE).unlink()
            (p / WINDOWS_FILE).write_bytes(b"")
            self._write_manifest()

    def append(self, rec):
        if self.archive.complete:
            raise ContractViolation("archive already finished")
        if rec.index != len(self.archive.records):
            raise ContractViolation(f"window {rec.index} out of order")
        self.archive.records.append(rec)
        if self.archive.path is not None:
            with open(self.archive.path / WINDOWS_FILE, "ab") as fh:
                fh.write(rec.encode(self._outer))

    def finish(self, complete=True, note=""):
        self.archive.complete = complete
        if self.archive.path is not None:
            self._write_manifest(note)
        return self.archive

    def _write_manifest(self, note=""):
        a = self.archive
        cfg = a.config
        m = {
            "format": "werrlab-run 1",
            "version": __version__,
            "run_id": cfg.run_id,
            "mode": cfg.assim.mode,
            "n": cfg.model.n,
            "subwindows_per_window": cfg.model.subwindows_per_window,
            "outer_loops": cfg.assim.outer_loops,
            "windows_planned": cfg.assim.windows,
            "windows_written": a.n_windows,
            "nonconverged_windows": int(np.sum(~a.converged)) if a.records else 0,
            "complete": "1" if a.complete else "0",
            "config_hash": cfg.hash,
            "has_q": "1" if a.q is not None else "0",
        }
        if note:
            m["note"] = note.replace("\n", " ")
        if a.complete:
            m["content_hash"] = content_hash(a.path)
        write_kv(a.path / MANIFEST_FILE, m)


def content_hash(path):
    """SHA-256 over the config snapshot, truth, window records and Q (not the manifest)."""
    path = Path(path)
    h = hashlib.sha256()
    for name in _HASHED:
        f = path / name
        if f.exists():
            h.update(name.encode() + b"\0")
            h.update(f.read_bytes())
    return h.hexdigest()


def load_archive(path):
    path = Path(path)
    if not (path / MANIFEST_FILE).exists():
        raise ContractViolation(f"{path} is not a run archive (no {MANIFEST_FILE})")
    manifest = read_kv(path / MANIFEST_FILE)
    cfg = ExperimentConfig.load(path / CONFIG_FILE)
    truth = read_matrix(path / TRUTH_FILE)
    buf = (path / WINDOWS_FILE).read_bytes()
    nsub = cfg.model.subwindows_per_window
    records, off = [], 0
    while off < len(buf):
        rec, off = WindowRecord.decode(buf, off, nsub)
        records.append(rec)
    complete = manifest.get("complete") == "1"
    if complete and len(records) != cfg.assim.windows:
        raise ContractViolation(
            f"{path}: manifest says complete but holds {len(records)} of {cfg.assim.windows} windows")
    q = read_matrix(path / Q_FILE) if (path / Q_FILE).exists() else None
    return RunArchive(cfg, truth, records, complete, q, path)


def as_archive(run):
    """Accept either a :class:`RunArchive` or a run directory."""
    return run if isinstance(run, RunArchive) else load_archive(run)
