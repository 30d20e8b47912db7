import numpy as np
import pytest

from werrlab.covmodel import CovarianceMatrix, GridMetric, gaussian_correlation, scale_std
from werrlab.dynamics import ModelSpec, default_bias_pattern, integrate_forced
from werrlab.errors import ContractViolation, RegularizationRequired
from werrlab.var4d import (
    ControlVector,
    EtaMask,
    MinimizeOptions,
    ObsSet,
    Priors,
    cost,
    debias_forecast,
    departures,
    gradient,
    minimize,
)

TIGHT = MinimizeOptions(outer_loops=1, cg_rtol=1e-13, max_inner=500)


def obs_from_traj(traj, indices, sigma, rng=None):
    vals = []
    for k, idx in enumerate(indices):
        v = traj.states[k, idx].copy()
        if rng is not None:
            v += sigma * rng.standard_normal(v.shape)
        vals.append(v)
    return ObsSet(indices, vals, sigma)


def dense_cost(x0, eta, xb, etab, Binv, Qinv, spec, obs, mask):
    traj = integrate_forced(x0, spec, mask * eta)
    jb = 0.5 * (x0 - xb) @ Binv @ (x0 - xb)
    jq = 0.5 * (eta - etab) @ Qinv @ (eta - etab)
    jo = 0.0
    for k, (idx, y) in enumerate(zip(obs.indices, obs.values)):
        for i, yy in zip(idx, y):
            jo += 0.5 * (traj.states[k, i] - yy) ** 2 / obs.sigma ** 2
    return jb + jo + jq


def small_setup(rng, n=4, nsub=2, sigma=0.5):
    spec = ModelSpec(n=n, subwindows_per_window=nsub, steps_per_subwindow=3, dt=0.02)
    xb = 8 + 2 * rng.normal(size=n)
    etab = 0.1 * rng.normal(size=n)
    a = rng.normal(size=(n, n))
    B = a @ a.T + n * np.eye(n)
    q = rng.normal(size=(n, n))
    Q = 0.01 * (q @ q.T + n * np.eye(n))
    idx = [rng.choice(n, size=int(rng.integers(1, n + 1)), replace=False) for _ in range(nsub + 1)]
    truth = integrate_forced(xb + rng.normal(size=n), spec, etab + 0.05 * rng.normal(size=n))
    obs = obs_from_traj(truth, idx, sigma, rng)
    return spec, Priors(xb, B, etab, Q), obs


class TestCost:
    def test_zero_at_consistent_control(self):
        rng = np.random.default_rng(0)
        spec, p, _ = small_setup(rng)
        traj = integrate_forced(p.xb, spec, p.etab)
        obs = obs_from_traj(traj, [np.arange(4)] * 3, 0.3)
        c = cost(ControlVector(p.xb, p.etab), p, obs, EtaMask.ones(4), spec)
        assert c.total == pytest.approx(0.0, abs=1e-20)

    def test_zero_without_obs(self):
        rng = np.random.default_rng(1)
        spec, p, _ = small_setup(rng)
        c = cost(ControlVector(p.xb, p.etab), p, ObsSet.empty(2), EtaMask.ones(4), spec)
        assert c.total == 0.0

    def test_dense_quadratic_form(self):
        rng = np.random.default_rng(2)
        spec = ModelSpec(n=4, subwindows_per_window=2, steps_per_subwindow=3, dt=0.02)
        xb, etab = 8 + rng.normal(size=4), 0.1 * rng.normal(size=4)
        p = Priors(xb, np.eye(4), etab, np.eye(4))
        obs = ObsSet([np.array([1]), np.zeros(0, int), np.array([3])], [np.array([7.5]), np.zeros(0), np.array([9.0])], 1.0)
        c = ControlVector(xb + rng.normal(size=4), etab + rng.normal(size=4))
        got = cost(c, p, obs, EtaMask.ones(4), spec)
        traj = integrate_forced(c.x0, spec, c.eta)
        jo = 0.5 * ((traj.states[0, 1] - 7.5) ** 2 + (traj.states[2, 3] - 9.0) ** 2)
        assert got.jb == pytest.approx(0.5 * np.sum((c.x0 - xb) ** 2), rel=1e-12)
        assert got.jq == pytest.approx(0.5 * np.sum((c.eta - etab) ** 2), rel=1e-12)
        assert got.jo == pytest.approx(jo, rel=1e-12)

    def test_strong_constraint_has_no_jq(self):
        rng = np.random.default_rng(3)
        spec, p, obs = small_setup(rng)
        sc = Priors(p.xb, p.B)
        c = cost(ControlVector(p.xb + 1, np.zeros(4)), sc, obs, EtaMask.ones(4), spec)
        assert c.jq == 0.0 and c.jb > 0

    def test_singular_q(self):
        with pytest.raises(RegularizationRequired):
            Priors(np.zeros(4), np.eye(4), None, np.zeros((4, 4)))

    def test_obs_shape_checked(self):
        rng = np.random.default_rng(3)
        spec, p, _ = small_setup(rng)
        with pytest.raises(ContractViolation):
            cost(ControlVector(p.xb, p.etab), p, ObsSet.empty(5), EtaMask.ones(4), spec)


class TestGradient:
    def test_against_central_differences(self):
        rng = np.random.default_rng(10)
        for _ in range(5):
            spec, p, obs = small_setup(rng)
            mask = EtaMask(rng.uniform(0, 1, 4))
            c = ControlVector(p.xb + 0.5 * rng.normal(size=4), p.etab + 0.05 * rng.normal(size=4))
            g = gradient(c, p, obs, mask, spec).ravel()
            z = c.ravel()
            fd = np.empty_like(z)
            h = 1e-6
            for i in range(z.size):
                zp, zm = z.copy(), z.copy()
                zp[i] += h
                zm[i] -= h
                fd[i] = (cost(ControlVector.from_flat(zp), p, obs, mask, spec).total
                         - cost(ControlVector.from_flat(zm), p, obs, mask, spec).total) / (2 * h)
            assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-6

    def test_matches_dense_evaluation(self):
        rng = np.random.default_rng(11)
        spec, p, obs = small_setup(rng)
        mask = EtaMask.ones(4)
        c = ControlVector(p.xb + rng.normal(size=4), p.etab)
        d = dense_cost(c.x0, c.eta, p.xb, p.etab, np.linalg.inv(p.B.entries), np.linalg.inv(p.Q.entries),
                       spec, obs, mask.active)
        assert cost(c, p, obs, mask, spec).total == pytest.approx(d, rel=1e-10)

    def test_zero_mask_eta_gradient_is_prior_term(self):
        rng = np.random.default_rng(12)
        spec, p, obs = small_setup(rng)
        c = ControlVector(p.xb + rng.normal(size=4), p.etab + 0.1 * rng.normal(size=4))
        g = gradient(c, p, obs, EtaMask.zeros(4), spec)
        np.testing.assert_allclose(g.eta, np.linalg.solve(p.Q.entries, c.eta - p.etab), rtol=1e-9)


def linear_oracle(a, spec, xb, etab, B, Q, obs, mask):
    """Posterior mean from the dense normal equations of the linear system."""
    n = a.shape[0]
    ah = a * spec.dt
    step = np.eye(n) + ah + ah @ ah / 2 + ah @ ah @ ah / 6 + ah @ ah @ ah @ ah / 24
    phi = np.linalg.matrix_power(step, spec.steps_per_subwindow)
    rows, ys = [], []
    for k, (idx, y) in enumerate(zip(obs.indices, obs.values)):
        fx = np.linalg.matrix_power(phi, k)
        fe = sum((np.linalg.matrix_power(phi, j) for j in range(k)), np.zeros((n, n))) @ np.diag(mask)
        f = np.hstack([fx, fe])
        for i, yy in zip(idx, y):
            rows.append(f[i])
            ys.append(yy)
    h = np.array(rows) / obs.sigma
    yv = np.array(ys) / obs.sigma
    p0inv = np.zeros((2 * n, 2 * n))
    p0inv[:n, :n] = np.linalg.inv(B)
    p0inv[n:, n:] = np.linalg.inv(Q)
    zb = np.concatenate([xb, etab])
    z = np.linalg.solve(p0inv + h.T @ h, p0inv @ zb + h.T @ yv)
    return z[:n], z[n:]


class TestMinimize:
    def test_linear_exact_posterior(self):
        rng = np.random.default_rng(20)
        a = rng.normal(size=(4, 4)) - 1.5 * np.eye(4)
        spec = ModelSpec.linear(a, subwindows_per_window=1, steps_per_subwindow=3, dt=0.05)
        xb, etab = rng.normal(size=4), 0.1 * rng.normal(size=4)
        B = np.diag([1.0, 2.0, 0.5, 1.5])
        Q = 0.3 * np.eye(4) + 0.1
        obs = ObsSet([np.array([0]), np.array([2])], [np.array([0.7]), np.array([-0.4])], 0.5)
        mask = EtaMask.ones(4)
        an, diag = minimize(Priors(xb, B, etab, Q), obs, mask, spec, TIGHT)
        x_ref, e_ref = linear_oracle(a, spec, xb, etab, B, Q, obs, mask.active)
        assert np.sqrt(np.mean((an.x0 - x_ref) ** 2)) < 1e-8
        assert np.sqrt(np.mean((an.eta - e_ref) ** 2)) < 1e-8
        assert diag.converged

    def test_no_observations_returns_prior(self):
        rng = np.random.default_rng(21)
        spec, p, _ = small_setup(rng)
        an, diag = minimize(p, ObsSet.empty(2), EtaMask.ones(4), spec)
        np.testing.assert_array_equal(an.x0, p.xb)
        np.testing.assert_array_equal(an.eta, p.etab)

    def test_gradient_vanishes_at_minimizer(self):
        rng = np.random.default_rng(22)
        spec, p, obs = small_setup(rng)
        mask = EtaMask.ones(4)
        an, diag = minimize(p, obs, mask, spec, MinimizeOptions(outer_loops=8, cg_rtol=1e-12, max_inner=200))
        g = gradient(an, p, obs, mask, spec).ravel()
        total = cost(an, p, obs, mask, spec).total
        assert np.linalg.norm(g) <= 1e-6 * (1 + abs(total))

    def test_outer_cost_non_increasing_and_inner_decreasing(self):
        rng = np.random.default_rng(23)
        spec, p, obs = small_setup(rng)
        _, diag = minimize(p, obs, EtaMask.ones(4), spec, MinimizeOptions(outer_loops=4))
        assert all(b <= a for a, b in zip(diag.cost_trace, diag.cost_trace[1:]))
        for costs in diag.inner_costs:
            assert all(b < a for a, b in zip(costs, costs[1:]))

    def test_perfect_model_tiny_q_matches_strong_constraint(self):
        rng = np.random.default_rng(24)
        n = 12
        spec = ModelSpec(n=n, subwindows_per_window=3, steps_per_subwindow=4)
        truth = integrate_forced(8 + 2 * rng.normal(size=n), spec)
        obs = obs_from_traj(truth, [np.arange(0, n, 2)] * 4, 0.2, rng)
        B = 0.5 * gaussian_correlation(GridMetric(n), 2.0)
        xb = truth.states[0] + 0.3 * rng.normal(size=n)
        Q = scale_std(CovarianceMatrix(0.01 * gaussian_correlation(GridMetric(n), 4.0) + 1e-4 * np.eye(n)), 1e-8)
        mask = EtaMask.ones(n)
        opts = MinimizeOptions(outer_loops=2, cg_rtol=1e-12, max_inner=300)
        wc, _ = minimize(Priors(xb, B, None, Q), obs, mask, spec, opts)
        sc, _ = minimize(Priors(xb, B), obs, mask, spec, opts)
        assert np.sqrt(np.mean((wc.x0 - sc.x0) ** 2)) < 1e-8

    def test_mask_invariance(self):
        rng = np.random.default_rng(25)
        n = 10
        spec = ModelSpec(n=n, bias_pattern=default_bias_pattern(n), subwindows_per_window=3)
        truth = integrate_forced(8 + 2 * rng.normal(size=n), spec)
        obs = obs_from_traj(truth, [np.arange(n)] * 4, 0.2, rng)
        fmodel = spec.unbiased()
        etab = 0.01 * rng.normal(size=n)
        mask = EtaMask(np.r_[np.zeros(3), np.linspace(0.3, 1, n - 3)])
        p = Priors(truth.states[0], 0.2 * np.eye(n), etab, 0.01 * gaussian_correlation(GridMetric(n), 3.0) + 1e-4 * np.eye(n))
        an, _ = minimize(p, obs, mask, fmodel)
        assert np.array_equal(an.eta[:3], etab[:3])
        assert not np.allclose(an.eta[3:], etab[3:])

    def test_zero_mask_matches_strong_constraint_bitwise(self):
        rng = np.random.default_rng(26)
        n = 10
        spec = ModelSpec(n=n)
        truth = integrate_forced(8 + 2 * rng.normal(size=n), spec)
        obs = obs_from_traj(truth, [np.arange(0, n, 2)] * 5, 0.2, rng)
        xb = truth.states[0] + 0.3 * rng.normal(size=n)
        B = 0.3 * gaussian_correlation(GridMetric(n), 2.0)
        mask = EtaMask.zeros(n)
        wc, dw = minimize(Priors(xb, B, np.zeros(n), 0.01 * np.eye(n)), obs, mask, spec)
        sc, ds = minimize(Priors(xb, B), obs, mask, spec)
        assert np.array_equal(wc.x0, sc.x0)
        assert np.all(wc.eta == 0)
        assert dw.cost_trace == ds.cost_trace


class TestDebiasForecast:
    def test_zero_eta(self):
        spec = ModelSpec(n=8)
        x0 = 8 + np.random.default_rng(0).normal(size=8)
        a = debias_forecast(ControlVector(x0, np.zeros(8)), spec, EtaMask.ones(8))
        np.testing.assert_array_equal(a.states, integrate_forced(x0, spec).states)

    def test_zero_mask(self):
        spec = ModelSpec(n=8)
        x0 = 8 + np.random.default_rng(0).normal(size=8)
        a = debias_forecast(ControlVector(x0, np.ones(8)), spec, EtaMask.zeros(8))
        np.testing.assert_array_equal(a.states, integrate_forced(x0, spec).states)

    def test_representable_bias_tracks_truth(self):
        n = 10
        rng = np.random.default_rng(1)
        # a linear system whose bias is a constant forcing, applied as one
        # forcing increment per sub-window on the zero-tendency hook
        c = 0.01 * rng.normal(size=n)
        truth_spec = ModelSpec.zero_tendency(n, bias_pattern=c / (5 * 0.01))
        model_spec = truth_spec.unbiased()
        x0 = rng.normal(size=n)
        truth = integrate_forced(x0, truth_spec)
        fc = debias_forecast(ControlVector(x0, c), model_spec, EtaMask.ones(n))
        np.testing.assert_allclose(fc.states, truth.states, atol=1e-13)


def test_departures_mark_unobserved():
    spec = ModelSpec(n=6, subwindows_per_window=1)
    traj = integrate_forced(np.full(6, 8.0), spec)
    obs = ObsSet([np.array([1]), np.array([2, 4])], [np.array([9.0]), np.array([7.0, 8.5])], 1.0)
    d = departures(traj, obs)
    assert d[0, 1] == pytest.approx(1.0)
    assert np.isnan(d[0, 0])
    np.testing.assert_allclose(d[1, [2, 4]], [-1.0, 0.5])
