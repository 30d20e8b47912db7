"""Lorenz-96 toy model with an additive tendency bias.

The truth configuration carries a smooth bias pattern ``b`` that the forecast
configuration lacks; the difference between the two is the systematic model
error that weak-constraint assimilation tries to estimate.  Everything here
works on a single state of shape ``(n,)`` or on a batch of shape ``(..., n)``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractViolation, IntegrationBlowup


def default_bias_pattern(n, amplitude=0.8):
    i = np.arange(n)
    return amplitude * np.sin(2.0 * np.pi * i / n)


@dataclass(frozen=True, eq=False)
class ModelSpec:
    n: int = 40
    forcing: float = 8.0
    bias_pattern: np.ndarray | None = None
    dt: float = 0.01
    steps_per_subwindow: int = 5
    subwindows_per_window: int = 4
    sppt_amplitude: float = 0.0
    sppt_corr_len: float = 2.0
    # bias(t) = bias_pattern * (1 + bias_modulation * sin(2 pi t / modulation_period))
    bias_modulation: float = 0.0
    modulation_period: float = 1.0
    # Test hook: when set, advection and damping are replaced by linear_op @ x.
    linear_op: np.ndarray | None = None

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 4:
            raise ContractViolation(f"n must be an integer >= 4, got {self.n}")
        if not self.dt > 0:
            raise ContractViolation(f"dt must be positive, got {self.dt}")
        if self.steps_per_subwindow < 1 or self.subwindows_per_window < 1:
            raise ContractViolation("step and sub-window counts must be >= 1")
        if self.sppt_amplitude < 0:
            raise ContractViolation("sppt_amplitude must be >= 0")
        if self.sppt_corr_len < 0:
            raise ContractViolation("sppt_corr_len must be >= 0")
        if not self.modulation_period > 0:
            raise ContractViolation("modulation_period must be positive")
        if self.bias_pattern is not None:
            b = np.array(self.bias_pattern, dtype=float)
            if b.shape != (self.n,) or not np.all(np.isfinite(b)):
                raise ContractViolation("bias_pattern must be a finite length-n vector")
            b.setflags(write=False)
            object.__setattr__(self, "bias_pattern", b)
        if self.linear_op is not None:
            a = np.array(self.linear_op, dtype=float)
            if a.shape != (self.n, self.n):
                raise ContractViolation("linear_op must be n x n")
            a.setflags(write=False)
            object.__setattr__(self, "linear_op", a)

    @property
    def subwindow_length(self):
        return self.dt * self.steps_per_subwindow

    @property
    def window_length(self):
        return self.subwindow_length * self.subwindows_per_window

    @property
    def has_bias(self):
        return self.bias_pattern is not None and bool(np.any(self.bias_pattern != 0))

    def bias_at(self, t):
        if not self.has_bias:
            return 0.0
        if self.bias_modulation == 0:
            return self.bias_pattern
        phase = 2.0 * np.pi * t / self.modulation_period
        return self.bias_pattern * (1.0 + self.bias_modulation * np.sin(phase))

    def unbiased(self):
        """The forecast-model twin of this configuration (no bias)."""
        return replace(self, bias_pattern=None, bias_modulation=0.0)

    def with_(self, **changes):
        return replace(self, **changes)

    @classmethod
    def linear(cls, a, **kwargs):
        """Linear test system dx/dt = A x (forcing and bias off)."""
        a = np.asarray(a, dtype=float)
        kwargs.setdefault("forcing", 0.0)
        return cls(n=a.shape[0], linear_op=a, **kwargs)

    @classmethod
    def zero_tendency(cls, n, **kwargs):
        return cls.linear(np.zeros((n, n)), **kwargs)


def _check_state(x, spec):
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 or x.shape[-1] != spec.n:
        raise ContractViolation(f"state has shape {x.shape}, expected (..., {spec.n})")
    return x


def tendency_parts(x, spec, t=0.0):
    """Split the tendency into a resolved-dynamics part and a "physics" part.

    For Lorenz-96 the dynamics is the advection ``(x_{i+1} - x_{i-2}) x_{i-1}``
    and the physics is damping plus forcing, ``-x_i + F + b_i``.  With the
    linear test hook the dynamics is ``A x`` and the physics ``F + b``.
    """
    x = _check_state(x, spec)
    if spec.linear_op is not None:
        dyn = x @ spec.linear_op.T
        phys = np.full_like(x, spec.forcing)
    else:
        dyn = (np.roll(x, -1, -1) - np.roll(x, 2, -1)) * np.roll(x, 1, -1)
        phys = spec.forcing - x
    if spec.has_bias:
        phys = phys + spec.bias_at(t)
    return dyn, phys


def tendency(x, spec, t=0.0):
    """dx_i/dt = (x_{i+1} - x_{i-2}) x_{i-1} - x_i + F + b_i on a periodic grid."""
    dyn, phys = tendency_parts(x, spec, t)
    return dyn + phys


def tendency_tl(x, dx, spec):
    if spec.linear_op is not None:
        return dx @ spec.linear_op.T
    return ((np.roll(dx, -1, -1) - np.roll(dx, 2, -1)) * np.roll(x, 1, -1)
            + (np.roll(x, -1, -1) - np.roll(x, 2, -1)) * np.roll(dx, 1, -1)
            - dx)


def tendency_adj(x, lam, spec):
    """Transpose of :func:`tendency_tl` applied to the co-state ``lam``."""
    if spec.linear_op is not None:
        return lam @ spec.linear_op
    a = lam * np.roll(x, 1, -1)
    c = lam * (np.roll(x, -1, -1) - np.roll(x, 2, -1))
    return np.roll(a, 1, -1) - np.roll(a, -2, -1) + np.roll(c, -1, -1) - lam


class SPPTPerturber:
    """Spatially correlated multiplicative tendency noise.

    Each call to :meth:`draw` returns a zero-mean, unit-variance field whose
    spatial correlation is Gaussian, ``exp(-d^2 / (2 corr_len^2))``, built by
    circular convolution of white noise with a Gaussian kernel of width
    ``corr_len / sqrt(2)``.
    """

    def __init__(self, spec, rng):
        self.spec = spec
        self.rng = rng
        n = spec.n
        if spec.sppt_corr_len > 0:
            i = np.arange(n)
            d = np.minimum(i, n - i)
            width = spec.sppt_corr_len / np.sqrt(2.0)
            kernel = np.exp(-0.5 * (d / width) ** 2)
            kernel /= np.sqrt(np.sum(kernel ** 2))
            self._kernel_hat = np.fft.rfft(kernel)
        else:
            self._kernel_hat = None

    def draw(self, shape=None):
        n = self.spec.n
        shape = (n,) if shape is None else tuple(shape)
        white = self.rng.standard_normal(shape)
        if self._kernel_hat is None:
            return white
        return np.fft.irfft(np.fft.rfft(white, axis=-1) * self._kernel_hat, n=n, axis=-1)


def _rk4_stages(x, spec, t, factor=None):
    h = spec.dt

    def f(y, tt):
        if factor is None:
            return tendency(y, spec, tt)
        dyn, phys = tendency_parts(y, spec, tt)
        return dyn + phys * factor

    k1 = f(x, t)
    x2 = x + 0.5 * h * k1
    k2 = f(x2, t + 0.5 * h)
    x3 = x + 0.5 * h * k2
    k3 = f(x3, t + 0.5 * h)
    x4 = x + h * k3
    k4 = f(x4, t + h)
    return (x, x2, x3, x4), x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def step(x, spec, perturber=None, t=0.0, index=None):
    """One classical RK4 step of size ``spec.dt``.

    With a perturber and a positive amplitude, the physics part of every
    tendency evaluation in the step (see :func:`tendency_parts`) is multiplied
    by ``1 + sppt_amplitude * xi`` for a single draw ``xi``; the resolved
    advection is left unperturbed.
    """
    x = _check_state(x, spec)
    factor = None
    if perturber is not None and spec.sppt_amplitude > 0:
        factor = 1.0 + spec.sppt_amplitude * perturber.draw(x.shape)
    # overflow is reported below as a blow-up, not as a floating-point warning
    with np.errstate(over="ignore", invalid="ignore"):
        _, out = _rk4_stages(x, spec, t, factor)
    if not np.all(np.isfinite(out)):
        where = f"step {index}" if index is not None else "step"
        raise IntegrationBlowup(f"non-finite state after {where} (t={t + spec.dt:g})",
                                step=index, time=t + spec.dt)
    return out


def _step_tl(x, dx, spec, t):
    h = spec.dt
    (x1, x2, x3, x4), out = _rk4_stages(x, spec, t)
    dk1 = tendency_tl(x1, dx, spec)
    dk2 = tendency_tl(x2, dx + 0.5 * h * dk1, spec)
    dk3 = tendency_tl(x3, dx + 0.5 * h * dk2, spec)
    dk4 = tendency_tl(x4, dx + h * dk3, spec)
    return out, dx + (h / 6.0) * (dk1 + 2.0 * dk2 + 2.0 * dk3 + dk4)


def _step_adj(stages, lam, spec):
    h = spec.dt
    x1, x2, x3, x4 = stages
    a_dx = lam.copy()
    a_k1 = (h / 6.0) * lam
    a_k2 = (h / 3.0) * lam
    a_k3 = (h / 3.0) * lam
    a_k4 = (h / 6.0) * lam
    g = tendency_adj(x4, a_k4, spec)
    a_dx += g
    a_k3 = a_k3 + h * g
    g = tendency_adj(x3, a_k3, spec)
    a_dx += g
    a_k2 = a_k2 + 0.5 * h * g
    g = tendency_adj(x2, a_k2, spec)
    a_dx += g
    a_k1 = a_k1 + 0.5 * h * g
    a_dx += tendency_adj(x1, a_k1, spec)
    return a_dx


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Model states at the sub-window boundaries 0..N of one window."""

    states: np.ndarray
    spec: ModelSpec
    eta: np.ndarray
    t0: float = 0.0
    perturbed: bool = False

    def __len__(self):
        return self.states.shape[0]

    @property
    def final(self):
        return self.states[-1]


def integrate(x0, spec, nsteps, perturber=None, t0=0.0):
    """Plain integration over ``nsteps`` steps; returns the final state."""
    x = _check_state(x0, spec).copy()
    t = t0
    for i in range(nsteps):
        x = step(x, spec, perturber, t, index=i)
        t += spec.dt
    return x


def integrate_forced(x0, spec, eta=None, perturber=None, t0=0.0):
    """Run one window, adding ``eta`` once at the end of every sub-window.

    ``states[k] = M(states[k-1]) + eta`` for ``k = 1..N``, with ``M`` made of
    ``steps_per_subwindow`` RK4 steps.
    """
    x = _check_state(x0, spec).copy()
    eta = np.zeros(spec.n) if eta is None else _check_state(eta, spec)
    nsub, spw = spec.subwindows_per_window, spec.steps_per_subwindow
    states = np.empty((nsub + 1,) + x.shape)
    states[0] = x
    t = t0
    for k in range(1, nsub + 1):
        for s in range(spw):
            x = step(x, spec, perturber, t, index=(k - 1) * spw + s)
            t += spec.dt
        x = x + eta
        states[k] = x
    perturbed = perturber is not None and spec.sppt_amplitude > 0
    return Trajectory(states, spec, np.array(eta), t0, perturbed)


def _check_traj(traj, spec=None):
    if traj.perturbed:
        raise ContractViolation("cannot linearize about a stochastically perturbed trajectory")
    if spec is not None and spec is not traj.spec:
        raise ContractViolation("trajectory was produced with a different ModelSpec")
    if traj.states.ndim != 2 or traj.states.shape[1] != traj.spec.n:
        raise ContractViolation("linearization needs a single (unbatched) trajectory")


def tangent_linear(traj, dx0, deta, spec=None):
    """Propagate ``(dx0, deta)`` along ``traj``; returns perturbations at k = 0..N.

    ``dx0`` and ``deta`` may carry a leading batch axis to propagate several
    perturbations at once.
    """
    _check_traj(traj, spec)
    sp = traj.spec
    dx = np.array(_check_state(dx0, sp), dtype=float)
    deta = _check_state(deta, sp)
    nsub, spw = sp.subwindows_per_window, sp.steps_per_subwindow
    out = [dx.copy()]
    t = traj.t0
    for k in range(1, nsub + 1):
        x = traj.states[k - 1]
        for _ in range(spw):
            x, dx = _step_tl(x, dx, sp, t)
            t += sp.dt
        dx = dx + deta
        out.append(dx)
    return np.stack(out)


def adjoint(traj, forcing, spec=None):
    """Transpose of :func:`tangent_linear`.

    ``forcing`` holds one co-state per sub-window boundary ``k = 1..N``
    (shape ``(N, n)`` or ``(N, m, n)``).  Returns ``(grad_x0, grad_eta)``.
    """
    _check_traj(traj, spec)
    sp = traj.spec
    nsub, spw = sp.subwindows_per_window, sp.steps_per_subwindow
    forcing = np.asarray(forcing, dtype=float)
    if forcing.shape[0] != nsub or forcing.shape[-1] != sp.n:
        raise ContractViolation(
            f"forcing has shape {forcing.shape}, expected ({nsub}, ..., {sp.n})")
    # sub-window start times, accumulated exactly as the forward sweep does
    starts = []
    t = traj.t0
    for _ in range(nsub):
        starts.append(t)
        for _ in range(spw):
            t += sp.dt
    lam = np.zeros(forcing.shape[1:])
    grad_eta = np.zeros(forcing.shape[1:])
    for k in range(nsub, 0, -1):
        lam = lam + forcing[k - 1]
        grad_eta += lam
        # recompute the stage states of this sub-window
        t = starts[k - 1]
        x = traj.states[k - 1]
        stages = []
        for _ in range(spw):
            st, x = _rk4_stages(x, sp, t)
            stages.append(st)
            t += sp.dt
        for st in reversed(stages):
            lam = _step_adj(st, lam, sp)
    return lam, grad_eta
