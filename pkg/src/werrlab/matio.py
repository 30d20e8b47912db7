"""On-disk formats.

WERRMAT v1
    One ASCII header line ``WERRMAT 1 <rows> <cols>`` followed by the entries
    in row-major order as 8-byte little-endian IEEE-754 doubles.

key=value
    Flat text, one ``key = value`` pair per line, ``#`` comments, dotted
    section prefixes in keys.  Used for configs, manifests and recipe sidecars.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np

from .errors import ContractViolation

MAT_MAGIC = "WERRMAT"
MAT_VERSION = 1
_LE_F8 = np.dtype("<f8")


def encode_matrix(a):
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ContractViolation("WERRMAT payloads are 2-D")
    header = f"{MAT_MAGIC} {MAT_VERSION} {a.shape[0]} {a.shape[1]}\n".encode("ascii")
    return header + np.ascontiguousarray(a, dtype=_LE_F8).tobytes()


def decode_matrix(buf, offset=0):
    """Decode one WERRMAT record from ``buf``; returns ``(array, next_offset)``."""
    end = buf.index(b"\n", offset)
    parts = buf[offset:end].decode("ascii").split()
    if len(parts) != 4 or parts[0] != MAT_MAGIC:
        raise ContractViolation(f"not a WERRMAT record: {buf[offset:end][:40]!r}")
    if int(parts[1]) != MAT_VERSION:
        raise ContractViolation(f"unsupported WERRMAT version {parts[1]}")
    rows, cols = int(parts[2]), int(parts[3])
    start = end + 1
    stop = start + rows * cols * 8
    if stop > len(buf):
        raise ContractViolation("truncated WERRMAT payload")
    a = np.frombuffer(buf[start:stop], dtype=_LE_F8).reshape(rows, cols).astype(float)
    return a, stop


def write_matrix(path, a):
    Path(path).write_bytes(encode_matrix(np.asarray(a)))


def read_matrix(path):
    buf = Path(path).read_bytes()
    a, end = decode_matrix(buf)
    if end != len(buf):
        raise ContractViolation(f"trailing bytes after WERRMAT payload in {path}")
    return a


def matrix_to_csv(a, path=None):
    """Lossless CSV (``repr`` of each double round-trips exactly)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    for row in a:
        w.writerow([repr(float(v)) for v in row])
    text = out.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def matrix_from_csv(text):
    rows = [r for r in csv.reader(io.StringIO(text)) if r]
    return np.array([[float(v) for v in r] for r in rows])


def format_kv(mapping):
    return "".join(f"{k} = {v}\n" for k, v in mapping.items())


def parse_kv(text):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ContractViolation(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def write_kv(path, mapping):
    Path(path).write_text(format_kv(mapping))


def read_kv(path):
    return parse_kv(Path(path).read_text())


def save_covariance(path, c, sidecar=True):
    """Write a covariance in WERRMAT format plus its ``.meta`` key=value sidecar."""
    path = Path(path)
    write_matrix(path, c.entries)
    if sidecar and c.meta:
        write_kv(path.with_suffix(path.suffix + ".meta"), dict(sorted(c.meta.items())))


def load_covariance(path):
    from .covmodel import CovarianceMatrix

    path = Path(path)
    meta_path = path.with_suffix(path.suffix + ".meta")
    meta = read_kv(meta_path) if meta_path.exists() else {}
    return CovarianceMatrix(read_matrix(path), meta)
