"""Experiment configuration: typed sections backed by flat dotted key=value text.

Every field of every section maps to one key, ``<section>.<field>``, so a
config file looks like::

    seed = 7
    model.n = 40
    truth.bias_modulation = 0.5
    assim.mode = wc

Keys that are absent keep their defaults; unknown keys are an error.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .dynamics import ModelSpec, default_bias_pattern
from .errors import ContractViolation
from .matio import format_kv, parse_kv


@dataclass
class ModelConfig:
    n: int = 40
    forcing: float = 8.0
    dt: float = 0.025
    steps_per_subwindow: int = 1
    subwindows_per_window: int = 4


@dataclass
class TruthConfig:
    bias_amplitude: float = 0.8
    bias_modulation: float = 0.5
    modulation_period: float = 10.0
    spinup_steps: int = 1000


@dataclass
class ObsConfig:
    stride: int = 2
    offset: int = 0
    sigma: float = 0.2
    # observations at boundaries 0, every, 2*every, ... < N (the window end is
    # the next window's start and is observed there)
    every: int = 1


@dataclass
class AssimConfig:
    mode: str = "sc"
    windows: int = 220
    spinup_windows: int = 20
    b_std: float = 0.3
    b_length: float = 0.5
    mask: str = "ramp"
    mask_fraction: float = 0.1
    outer_loops: int = 2
    cg_rtol: float = 1e-3
    max_inner: int = 100
    q_path: str = ""


@dataclass
class SpptConfig:
    amplitude: float = 0.05
    corr_len: float = 2.0
    ens_size: int = 50
    launches: int = 4


@dataclass
class TaperConfig:
    d0: float = 6.0
    d1: float = 10.0
    vertical_halfwidth: float = 12.0
    mode: str = "both"


@dataclass
class AnnConfig:
    hidden: str = "138,138,138"
    dropout: float = 0.2
    epochs: int = 200
    learning_rate: float = 1e-3
    batch_size: int = 64
    patience: int = 20
    half_width: int = 2
    val_fraction: float = 0.2
    # Fourier wavenumbers kept in the training fields (0 keeps everything)
    truncation: int = 1

    @property
    def hidden_widths(self):
        return tuple(int(v) for v in self.hidden.split(","))


_SECTIONS = {
    "model": ModelConfig,
    "truth": TruthConfig,
    "obs": ObsConfig,
    "assim": AssimConfig,
    "sppt": SpptConfig,
    "taper": TaperConfig,
    "ann": AnnConfig,
}


@dataclass
class ExperimentConfig:
    seed: int = 0
    run_id: str = "run"
    model: ModelConfig = field(default_factory=ModelConfig)
    truth: TruthConfig = field(default_factory=TruthConfig)
    obs: ObsConfig = field(default_factory=ObsConfig)
    assim: AssimConfig = field(default_factory=AssimConfig)
    sppt: SpptConfig = field(default_factory=SpptConfig)
    taper: TaperConfig = field(default_factory=TaperConfig)
    ann: AnnConfig = field(default_factory=AnnConfig)

    # -- flat representation -------------------------------------------------

    def to_flat(self):
        out = {"seed": str(self.seed), "run_id": self.run_id}
        for name in _SECTIONS:
            sec = getattr(self, name)
            for f in dataclasses.fields(sec):
                v = getattr(sec, f.name)
                out[f"{name}.{f.name}"] = repr(v) if isinstance(v, float) else str(v)
        return out

    @classmethod
    def from_flat(cls, mapping):
        cfg = cls()
        for key, raw in mapping.items():
            cfg = cfg.with_(**{key: raw})
        cfg.validate()
        return cfg

    def with_(self, **changes):
        """Copy with dotted-key overrides, e.g. ``cfg.with_(**{"assim.mode": "wc"})``.

        Values may be given as strings (parsed to the field type) or as values.
        """
        cfg = dataclasses.replace(self, **{name: dataclasses.replace(getattr(self, name))
                                           for name in _SECTIONS})
        for key, raw in changes.items():
            if key in ("seed", "run_id"):
                setattr(cfg, key, int(raw) if key == "seed" else str(raw))
                continue
            sec_name, _, fname = key.partition(".")
            if sec_name not in _SECTIONS or not fname:
                raise ContractViolation(f"unknown config key {key!r}")
            sec = getattr(cfg, sec_name)
            types = {f.name: f.type for f in dataclasses.fields(sec)}
            if fname not in types:
                raise ContractViolation(f"unknown config key {key!r}")
            setattr(sec, fname, _coerce(raw, types[fname], key))
        return cfg

    def to_text(self):
        return format_kv(self.to_flat())

    def save(self, path):
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path):
        return cls.from_flat(parse_kv(Path(path).read_text()))

    @property
    def hash(self):
        """Short content hash of the canonical flat form (run_id excluded)."""
        flat = self.to_flat()
        flat.pop("run_id")
        canon = "".join(f"{k}={flat[k]}\n" for k in sorted(flat))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    # -- derived objects -----------------------------------------------------

    def validate(self):
        m, a = self.model, self.assim
        if m.n < 4:
            raise ContractViolation("model.n must be >= 4")
        if m.dt <= 0 or m.steps_per_subwindow < 1 or m.subwindows_per_window < 1:
            raise ContractViolation("time stepping parameters must be positive")
        if a.mode not in ("sc", "wc"):
            raise ContractViolation(f"assim.mode must be sc or wc, got {a.mode!r}")
        if a.mask not in ("ramp", "ones", "zeros"):
            raise ContractViolation(f"assim.mask must be ramp, ones or zeros, got {a.mask!r}")
        if a.windows < 0 or a.spinup_windows < 0:
            raise ContractViolation("window counts must be non-negative")
        if a.b_std <= 0 or a.b_length < 0:
            raise ContractViolation("assim.b_std must be positive and b_length non-negative")
        if not self.obs.sigma >= 0 or self.obs.stride < 1 or self.obs.every < 1:
            raise ContractViolation("observation settings out of range")
        if self.taper.mode not in ("horizontal", "vertical", "both"):
            raise ContractViolation(f"taper.mode must be horizontal, vertical or both")
        if self.sppt.ens_size < 2 or self.sppt.launches < 1:
            raise ContractViolation("sppt.ens_size must be >= 2 and sppt.launches >= 1")
        if self.ann.truncation < 0:
            raise ContractViolation("ann.truncation must be >= 0")
        if not 0 <= self.ann.dropout < 1:
            raise ContractViolation("ann.dropout must lie in [0, 1)")
        return self

    def forecast_spec(self):
        m = self.model
        return ModelSpec(n=m.n, forcing=m.forcing, dt=m.dt, steps_per_subwindow=m.steps_per_subwindow,
                         subwindows_per_window=m.subwindows_per_window)

    def truth_spec(self):
        t = self.truth
        bias = default_bias_pattern(self.model.n, t.bias_amplitude) if t.bias_amplitude else None
        return self.forecast_spec().with_(bias_pattern=bias, bias_modulation=t.bias_modulation,
                                          modulation_period=t.modulation_period)

    def sppt_spec(self):
        return self.forecast_spec().with_(sppt_amplitude=self.sppt.amplitude,
                                          sppt_corr_len=self.sppt.corr_len)


def _coerce(raw, typ, key):
    if not isinstance(raw, str):
        return raw
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except ValueError:
        raise ContractViolation(f"{key}: cannot parse {raw!r} as {typ}") from None
    return raw
