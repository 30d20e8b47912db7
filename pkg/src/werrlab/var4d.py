"""Strong- and weak-constraint 4D-Var in the model-error forcing formulation.

The control vector is ``(x0, eta)``: the initial state and one constant
forcing added at the end of every sub-window.  The cost is

    J = 1/2 |x0 - xb|^2_{B^-1} + 1/2 sum_k |H x_k - y_k|^2_{R^-1}
        + 1/2 |eta - eta_b|^2_{Q^-1}

with the trajectory ``x_k`` produced by :func:`integrate_forced` using the
masked forcing ``mask * eta``.  Strong-constraint runs simply carry ``Q=None``
and keep ``eta`` at its prior.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

from .covmodel import CovarianceMatrix, ensure_psd
from .dynamics import adjoint, integrate_forced, tangent_linear
from .errors import ContractViolation, RegularizationRequired

log = logging.getLogger(__name__)

EIG_FLOOR = 1e-10


@dataclass
class ControlVector:
    x0: np.ndarray
    eta: np.ndarray

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        self.eta = np.asarray(self.eta, dtype=float)
        if self.x0.shape != self.eta.shape or self.x0.ndim != 1:
            raise ContractViolation("x0 and eta must be vectors of equal length")

    def ravel(self):
        return np.concatenate([self.x0, self.eta])

    @classmethod
    def from_flat(cls, v):
        n = v.size // 2
        return cls(v[:n].copy(), v[n:].copy())


def _regularized_factor(c, name):
    a = c.entries if isinstance(c, CovarianceMatrix) else np.asarray(c, dtype=float)
    if not np.all(np.isfinite(a)):
        raise RegularizationRequired(f"{name} has non-finite entries")
    if np.linalg.eigvalsh(a)[-1] <= 0:
        raise RegularizationRequired(f"{name} is singular (no positive eigenvalue)")
    reg = ensure_psd(CovarianceMatrix(a), floor=EIG_FLOOR)
    return cholesky(reg.entries, lower=True)


class Priors:
    """Background state, prior forcing, and the B and Q covariances.

    ``Q=None`` selects strong-constraint mode.  Inverses are applied through
    Cholesky factors of the matrices after an eigenvalue floor of
    ``1e-10 * lambda_max``.
    """

    def __init__(self, xb, B, etab=None, Q=None):
        self.xb = np.asarray(xb, dtype=float)
        self.etab = np.zeros_like(self.xb) if etab is None else np.asarray(etab, dtype=float)
        self.B = B if isinstance(B, CovarianceMatrix) else CovarianceMatrix(B)
        self.Q = None if Q is None else (Q if isinstance(Q, CovarianceMatrix) else CovarianceMatrix(Q))
        n = self.xb.size
        if self.etab.shape != (n,) or self.B.n != n or (self.Q is not None and self.Q.n != n):
            raise ContractViolation("prior dimensions do not match")
        self.LB = _regularized_factor(self.B, "B")
        self.LQ = None if self.Q is None else _regularized_factor(self.Q, "Q")

    @property
    def weak(self):
        return self.Q is not None

    @property
    def n(self):
        return self.xb.size

    def jb(self, x0):
        z = solve_triangular(self.LB, x0 - self.xb, lower=True)
        return 0.5 * float(z @ z)

    def jq(self, eta):
        if not self.weak:
            return 0.0
        z = solve_triangular(self.LQ, eta - self.etab, lower=True)
        return 0.5 * float(z @ z)

    def b_inv(self, v):
        return cho_solve((self.LB, True), v)

    def q_inv(self, v):
        return cho_solve((self.LQ, True), v)


@dataclass
class ObsSet:
    """Point observations at sub-window boundaries k = 0..N.

    ``indices[k]`` are the observed grid points at boundary ``k`` and
    ``values[k]`` the observed values; the error is ``sigma`` everywhere.
    A zero ``sigma`` (error-free synthetic observations) can be stored but
    not assimilated.
    """

    indices: list
    values: list
    sigma: float

    def __post_init__(self):
        if len(self.indices) != len(self.values):
            raise ContractViolation("indices and values must have one entry per boundary")
        if not self.sigma >= 0:
            raise ContractViolation("observation error std must be non-negative")
        self.indices = [np.asarray(i, dtype=int).reshape(-1) for i in self.indices]
        self.values = [np.asarray(v, dtype=float).reshape(-1) for v in self.values]
        for i, v in zip(self.indices, self.values):
            if i.shape != v.shape:
                raise ContractViolation("each boundary needs as many values as indices")

    @classmethod
    def empty(cls, nsub, sigma=1.0):
        return cls([np.zeros(0, int)] * (nsub + 1), [np.zeros(0)] * (nsub + 1), sigma)

    @property
    def count(self):
        return int(sum(i.size for i in self.indices))

    def check(self, spec):
        if len(self.indices) != spec.subwindows_per_window + 1:
            raise ContractViolation(
                f"ObsSet has {len(self.indices)} boundaries, expected {spec.subwindows_per_window + 1}")
        for i in self.indices:
            if i.size and (i.min() < 0 or i.max() >= spec.n):
                raise ContractViolation("observation index outside the grid")
        if self.count and not self.sigma > 0:
            raise ContractViolation("assimilated observations need a positive error std")


@dataclass
class EtaMask:
    active: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.active, dtype=float)
        if a.ndim != 1 or np.any(a < 0) or np.any(a > 1):
            raise ContractViolation("mask weights must lie in [0, 1]")
        self.active = a

    @classmethod
    def ones(cls, n):
        return cls(np.ones(n))

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n))

    @classmethod
    def ramp(cls, n, fraction=0.1):
        """Inactive at index 0, linear ramp to full activation over ``fraction * n`` points."""
        width = max(1, int(round(fraction * n)))
        return cls(np.clip(np.arange(n) / width, 0.0, 1.0))

    @property
    def support(self):
        return np.flatnonzero(self.active > 0)


@dataclass
class CostBreakdown:
    jb: float
    jo: float
    jq: float

    @property
    def total(self):
        return self.jb + self.jo + self.jq


def _trajectory(c, mask, spec, t0):
    return integrate_forced(c.x0, spec, mask.active * c.eta, t0=t0)


def departures(traj, obs):
    """``y - H x`` at every boundary as an ``(N+1, n)`` array, NaN where unobserved."""
    out = np.full(traj.states.shape, np.nan)
    for k, (idx, y) in enumerate(zip(obs.indices, obs.values)):
        out[k, idx] = y - traj.states[k, idx]
    return out


def _jo(traj, obs):
    s = 0.0
    for k, (idx, y) in enumerate(zip(obs.indices, obs.values)):
        if idx.size:
            d = (traj.states[k, idx] - y) / obs.sigma
            s += float(d @ d)
    return 0.5 * s


def cost(c, p, obs, mask, spec, t0=0.0):
    obs.check(spec)
    traj = _trajectory(c, mask, spec, t0)
    return CostBreakdown(p.jb(c.x0), _jo(traj, obs), p.jq(c.eta))


def gradient(c, p, obs, mask, spec, t0=0.0):
    """Exact gradient of :func:`cost` by the adjoint model."""
    obs.check(spec)
    traj = _trajectory(c, mask, spec, t0)
    nsub = spec.subwindows_per_window
    w = np.zeros((nsub + 1, spec.n))
    for k, (idx, y) in enumerate(zip(obs.indices, obs.values)):
        if idx.size:
            np.add.at(w[k], idx, (traj.states[k, idx] - y) / obs.sigma ** 2)
    gx_adj, ge_adj = adjoint(traj, w[1:])
    gx = p.b_inv(c.x0 - p.xb) + w[0] + gx_adj
    if p.weak:
        ge = p.q_inv(c.eta - p.etab) + mask.active * ge_adj
    else:
        ge = np.zeros(spec.n)
    return ControlVector(gx, ge)


@dataclass
class MinimizeOptions:
    outer_loops: int = 2
    cg_rtol: float = 1e-3
    max_inner: int = 100
    max_backtracks: int = 5


@dataclass
class MinimizeDiagnostics:
    cost_trace: list = field(default_factory=list)
    inner_costs: list = field(default_factory=list)
    inner_iterations: list = field(default_factory=list)
    converged: bool = True
    message: str = ""
    breakdown: CostBreakdown | None = None


def _eta_preconditioner(p, mask):
    """Square root of the prior covariance of the active forcing entries.

    Inactive entries are pinned at their prior value.  The remaining block of
    the cost is ``d_A^T (Q^-1)_AA d_A``, so the preconditioner is a factor of
    ``((Q^-1)_AA)^-1``; with every entry active that is simply ``L_Q``.
    """
    if not p.weak:
        return np.zeros(0, int), np.zeros((p.n, 0))
    act = mask.support
    if act.size == p.n:
        return act, p.LQ
    if act.size == 0:
        return act, np.zeros((p.n, 0))
    qinv = cho_solve((p.LQ, True), np.eye(p.n))
    block = qinv[np.ix_(act, act)]
    cov = np.linalg.inv(block)
    la = cholesky(0.5 * (cov + cov.T), lower=True)
    full = np.zeros((p.n, act.size))
    full[act] = la
    return act, full


def _cg(hess, grad0, w0, rtol, maxiter, quad):
    """Conjugate gradients on ``hess w = rhs`` starting from ``w0``.

    ``grad0`` is the gradient at ``w0``.  Returns ``(w, iterations, costs,
    converged, broke_down)``.
    """
    w = w0.copy()
    r = -grad0
    g0 = np.linalg.norm(r)
    costs = [quad(w)]
    if g0 == 0:
        return w, 0, costs, True, False
    d = r.copy()
    rr = r @ r
    for it in range(1, maxiter + 1):
        hd = hess(d)
        curv = d @ hd
        if not np.isfinite(curv) or curv <= 0:
            return w, it - 1, costs, False, True
        alpha = rr / curv
        w = w + alpha * d
        r = r - alpha * hd
        costs.append(quad(w))
        rr_new = r @ r
        if np.sqrt(rr_new) <= rtol * g0:
            return w, it, costs, True, False
        d = r + (rr_new / rr) * d
        rr = rr_new
    return w, maxiter, costs, False, False


def _steepest_descent(hess, grad, w0, rtol, maxiter, quad):
    w = w0.copy()
    g = grad(w)
    g0 = np.linalg.norm(g)
    costs = [quad(w)]
    for it in range(1, maxiter + 1):
        hg = hess(g)
        curv = g @ hg
        if not np.isfinite(curv) or curv <= 0:
            return w, it - 1, costs, False
        w = w - (g @ g) / curv * g
        costs.append(quad(w))
        g = grad(w)
        if np.linalg.norm(g) <= rtol * g0:
            return w, it, costs, True
    return w, maxiter, costs, False


def minimize(p, obs, mask, spec, opts=None, t0=0.0):
    """Incremental (Gauss-Newton) minimization of the 4D-Var cost.

    Each outer loop relinearizes about the current trajectory; the inner loop
    runs CG on the quadratic cost in the preconditioned variables
    ``u = L_B^-1 dx0`` and ``v = L_Q^-1 deta``.  Outer iterates that would
    raise the nonlinear cost are shortened by backtracking, so the outer
    cost sequence never increases.
    """
    opts = opts or MinimizeOptions()
    obs.check(spec)
    n = p.n
    act, lq = _eta_preconditioner(p, mask)
    nu, nv = n, lq.shape[1]
    obs_k = [(k, idx, y) for k, (idx, y) in enumerate(zip(obs.indices, obs.values)) if idx.size]

    def control(w):
        x0 = p.xb + p.LB @ w[:nu]
        eta = p.etab + lq @ w[nu:] if nv else p.etab.copy()
        return ControlVector(x0, eta)

    w_cur = np.zeros(nu + nv)
    cur = control(w_cur)
    cur_cost = cost(cur, p, obs, mask, spec, t0)
    diag = MinimizeDiagnostics(cost_trace=[cur_cost.total], breakdown=cur_cost)
    if not obs_k:
        diag.message = "no observations"
        return cur, diag

    # columns of the control-to-state map: dx0 = L_B u, deta = mask * (lq v)
    dx_cols = np.zeros((nu + nv, n))
    de_cols = np.zeros((nu + nv, n))
    dx_cols[:nu] = p.LB.T
    if nv:
        de_cols[nu:] = (mask.active[:, None] * lq).T

    for outer in range(opts.outer_loops):
        traj = _trajectory(cur, mask, spec, t0)
        jac = tangent_linear(traj, dx_cols, de_cols)  # (N+1, m, n)
        a = np.vstack([jac[k][:, idx].T / obs.sigma for k, idx, _ in obs_k])
        b = np.concatenate([(y - traj.states[k, idx]) / obs.sigma for k, idx, y in obs_k])

        def hess(v, a=a):
            return v + a.T @ (a @ v)

        def quad(w, a=a, b=b, wg=w_cur):
            r = a @ (w - wg) - b
            return 0.5 * float(w @ w) + 0.5 * float(r @ r)

        def grad(w, a=a, b=b, wg=w_cur):
            return w + a.T @ (a @ (w - wg) - b)

        w_new, iters, costs, ok, broke = _cg(hess, grad(w_cur), w_cur, opts.cg_rtol, opts.max_inner, quad)
        if broke:
            log.warning("CG breakdown in outer loop %d; restarting with steepest descent", outer)
            w_new, more, sd_costs, ok = _steepest_descent(
                hess, grad, w_new, opts.cg_rtol, max(opts.max_inner - iters, 1), quad)
            iters += more
            costs += sd_costs[1:]
            if not ok:
                diag.message = f"inner loop did not converge after breakdown (outer {outer})"
        elif not ok:
            diag.message = f"inner loop hit the iteration cap (outer {outer})"
        diag.converged = diag.converged and ok
        diag.inner_iterations.append(iters)
        diag.inner_costs.append(costs)

        step = w_new - w_cur
        accepted = False
        for _ in range(opts.max_backtracks + 1):
            cand = control(w_cur + step)
            cand_cost = cost(cand, p, obs, mask, spec, t0)
            if cand_cost.total <= cur_cost.total:
                w_cur, cur, cur_cost = w_cur + step, cand, cand_cost
                accepted = True
                break
            step = 0.5 * step
        diag.cost_trace.append(cur_cost.total)
        if not accepted:
            diag.message = diag.message or f"no cost decrease in outer loop {outer}"
            break
    diag.breakdown = cur_cost
    return cur, diag


def debias_forecast(analysis, spec, mask, t0=0.0):
    """Forecast from the analysis with the estimated forcing switched on."""
    return integrate_forced(analysis.x0, spec, mask.active * analysis.eta, t0=t0)
