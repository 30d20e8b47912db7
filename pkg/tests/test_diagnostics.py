import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from werrlab import diagnostics as dg
from werrlab.archive import RunArchive, WindowRecord
from werrlab.config import ExperimentConfig
from werrlab.covmodel import CovarianceMatrix, GridMetric, gaussian_correlation, scale_std
from werrlab.cycling import generate_truth_and_obs, run_cycle
from werrlab.errors import ContractViolation, InsufficientSamples, InsufficientWindows


def synthetic_run(xb, xa, eta=None, omb=None, oma=None, spinup=0, truth=None, **over):
    xb, xa = np.asarray(xb, float), np.asarray(xa, float)
    nw, n = xb.shape
    cfg = ExperimentConfig().with_(**{"model.n": n, "assim.windows": nw, "assim.spinup_windows": spinup,
                                      **over})
    nb = cfg.model.subwindows_per_window + 1
    eta = np.zeros((nw, n)) if eta is None else np.asarray(eta, float)
    omb = np.full((nw, nb, n), np.nan) if omb is None else omb
    oma = np.full((nw, nb, n), np.nan) if oma is None else oma
    recs = [WindowRecord(w, xb[w], xa[w], np.zeros(n), eta[w], omb[w], oma[w]) for w in range(nw)]
    truth = np.zeros((nw * (nb - 1) + 1, n)) if truth is None else truth
    return RunArchive(cfg, truth, recs, True)


# -- CSV plumbing ----------------------------------------------------------------

def test_csv_header_round_trip(tmp_path):
    t = dg.ProfileTable("std", "per_time", [1.0, 2.0])
    text = t.to_csv(tmp_path / "s.csv", "run-a", "abc123")
    assert (tmp_path / "s.csv").read_text() == text
    assert dg.parse_header(text) == {"metric": "std", "units": "per_time", "run_id": "run-a",
                                     "config_hash": "abc123"}
    lines = text.splitlines()
    assert lines[1] == "index,std" and lines[2] == "0,1.0" and len(lines) == 4


def test_csv_values_are_lossless():
    v = np.random.default_rng(0).standard_normal(5)
    text = dg.ProfileTable("x", "1", v).to_csv()
    back = [float(line.split(",")[1]) for line in text.splitlines()[2:]]
    np.testing.assert_array_equal(back, v)


def test_header_required():
    with pytest.raises(ContractViolation):
        dg.parse_header("index,std\n")


# -- std profile ---------------------------------------------------------------------

def test_std_profile_identity_is_ones():
    np.testing.assert_array_equal(dg.std_profile(CovarianceMatrix(np.eye(6))).values, np.ones(6))


def test_std_profile_square_roots_and_units():
    q = CovarianceMatrix(np.diag([4.0, 9.0, 16.0]))
    np.testing.assert_array_equal(dg.std_profile(q).values, [2.0, 3.0, 4.0])
    np.testing.assert_allclose(dg.std_profile(q, nsub=4, window_length=0.1).values, [80.0, 120.0, 160.0])


def test_std_profile_halved_by_scale_std():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((8, 8))
    q = CovarianceMatrix(a @ a.T)
    np.testing.assert_allclose(dg.std_profile(scale_std(q, 0.5)).values, 0.5 * dg.std_profile(q).values,
                               rtol=1e-15)


# -- correlations ----------------------------------------------------------------------

def test_diagonal_q_has_identity_correlation_and_zero_scales():
    q = CovarianceMatrix(np.diag(np.arange(1.0, 9.0)))
    r, flag = dg.correlation_map(q)
    np.testing.assert_array_equal(r, np.eye(8))
    assert not flag
    assert all(row.length_scale == 0 for row in dg.horizontal_correlation_rows(q, range(8)))


def test_gaussian_length_scale_is_half_height():
    q = CovarianceMatrix(2.5 * gaussian_correlation(GridMetric(60), 3.0))
    rows = dg.horizontal_correlation_rows(q, [0, 17, 59])
    half_height = 3.0 * np.sqrt(2 * np.log(2))   # 3 * 1.1774
    for row in rows:
        assert abs(row.length_scale - half_height) < 0.5
        assert row.crossed
        assert row.values[row.distances == 0] == pytest.approx(1.0)


def test_correlation_is_scale_invariant():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((7, 7))
    q = CovarianceMatrix(a @ a.T)
    np.testing.assert_allclose(dg.correlation_map(scale_std(q, 3.7))[0], dg.correlation_map(q)[0], atol=1e-14)


def test_zero_variance_rows_flagged():
    q = CovarianceMatrix(np.diag([1.0, 0.0, 2.0]))
    r, flag = dg.correlation_map(q)
    assert flag
    np.testing.assert_array_equal(r, np.eye(3))


def test_correlation_rows_csv_layout():
    q = CovarianceMatrix(gaussian_correlation(GridMetric(10), 1.0))
    text = dg.correlation_rows_csv(dg.horizontal_correlation_rows(q, [2, 5]))
    lines = text.splitlines()
    assert lines[1] == "index,distance,correlation,length_scale"
    assert len(lines) == 2 + 2 * 10


# -- increments ----------------------------------------------------------------------------

def test_no_observation_run_has_zero_increments():
    xb = np.random.default_rng(3).standard_normal((5, 4))
    mean, rms = dg.increment_stats(synthetic_run(xb, xb))
    assert not np.any(mean.values) and not np.any(rms.values)


def test_alternating_increments():
    c = 0.7
    nw, n = 10, 5
    xb = np.zeros((nw, n))
    xa = c * np.where(np.arange(nw) % 2 == 0, 1.0, -1.0)[:, None] * np.ones(n)
    mean, rms = dg.increment_stats(synthetic_run(xb, xa))
    np.testing.assert_allclose(mean.values, 0.0, atol=1e-15)
    np.testing.assert_allclose(rms.values, c, rtol=1e-14)
    assert mean.metric == "mean_increment" and rms.metric == "rms_increment"


def test_increment_stats_spinup_and_errors():
    xb = np.zeros((25, 3))
    xa = np.vstack([np.full((20, 3), 9.0), np.full((5, 3), 1.0)])
    mean, _ = dg.increment_stats(synthetic_run(xb, xa, spinup=20))
    np.testing.assert_array_equal(mean.values, 1.0)
    with pytest.raises(InsufficientWindows):
        dg.increment_stats(synthetic_run(xb, xa), spinup=24)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 12), st.floats(-3, 3))
def test_increment_rms_bounds_mean(seed, nw, shift):
    rng = np.random.default_rng(seed)
    xa = shift + rng.standard_normal((nw, 4))
    mean, rms = dg.increment_stats(synthetic_run(np.zeros((nw, 4)), xa))
    assert np.all(rms.values >= np.abs(mean.values) * (1 - 1e-12))


# -- departures -------------------------------------------------------------------------------

def departures_run(omb, oma):
    nw, nb, n = omb.shape
    return synthetic_run(np.zeros((nw, n)), np.zeros((nw, n)), omb=omb, oma=oma,
                         **{"model.subwindows_per_window": nb - 1})


def test_perfect_analyses_and_noise_free_obs_give_zero_departures():
    z = np.zeros((3, 5, 6))
    stats = dg.departure_stats(departures_run(z, z))
    for c in stats.cells:
        assert c.mean == 0 and c.rms == 0 and c.count == 90


def test_oa_rms_equals_obs_noise_when_analyses_are_truth():
    sigma = 0.3
    rng = np.random.default_rng(4)
    noise = sigma * rng.standard_normal((500, 5, 4))   # 10^4 departures
    stats = dg.departure_stats(departures_run(noise, noise))
    cell = stats.cell("all", "O-A")
    assert cell.count == 10_000
    assert abs(cell.rms / sigma - 1) < 0.05


def test_departures_grouped_and_nan_ignored():
    omb = np.full((2, 2, 4), np.nan)
    omb[:, 0, :2] = 1.0
    omb[:, 0, 2:] = -2.0
    stats = dg.departure_stats(departures_run(omb, omb), {"west": [0, 1], "east": [2, 3]})
    w, e = stats.cell("west", "O-B"), stats.cell("east", "O-B")
    assert (w.mean, w.rms, w.count) == (1.0, 1.0, 4)
    assert (e.mean, e.rms, e.count) == (-2.0, 2.0, 4)
    with pytest.raises(KeyError):
        stats.cell("north", "O-B")


def test_empty_group_is_an_error():
    omb = np.full((2, 2, 4), np.nan)
    omb[:, 0, 0] = 1.0
    with pytest.raises(ContractViolation):
        dg.departure_stats(departures_run(omb, omb), {"dark": [3]})


def test_ratio_of_run_against_itself_is_hundred():
    rng = np.random.default_rng(5)
    d = rng.standard_normal((4, 3, 5))
    stats = dg.departure_stats(departures_run(d, 0.5 * d), {"a": [0, 1], "b": [2, 3, 4]})
    ratios = dg.departure_ratios(stats, stats)
    assert set(ratios.values()) == {100.0}
    text = dg.ratio_table_csv(ratios)
    assert dg.parse_header(text)["units"] == "percent"


def test_ratio_against_better_control():
    rng = np.random.default_rng(6)
    d = rng.standard_normal((4, 3, 5))
    r = dg.departure_ratios(dg.departure_stats(departures_run(d, d)),
                            dg.departure_stats(departures_run(2 * d, 2 * d)))
    assert r[("all", "O-B")] == pytest.approx(50.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-2, 2))
def test_departure_rms_bounds_mean(seed, shift):
    d = shift + np.random.default_rng(seed).standard_normal((3, 3, 4))
    for c in dg.departure_stats(departures_run(d, d)).cells:
        assert c.count >= 1 and c.rms >= abs(c.mean) * (1 - 1e-12)


# -- forecast skill -------------------------------------------------------------------------------

def perfect_model_run():
    cfg = ExperimentConfig().with_(**{"model.n": 20, "assim.windows": 12, "assim.spinup_windows": 0,
                                      "truth.bias_amplitude": 0.0, "truth.spinup_steps": 200})
    twin = generate_truth_and_obs(cfg)
    nsub = cfg.model.subwindows_per_window
    starts = twin.truth[::nsub][:cfg.assim.windows]
    return synthetic_run(starts, starts, truth=twin.truth, **{"model.n": 20, "truth.bias_amplitude": 0.0})


def test_forecast_from_truth_with_perfect_model_has_zero_error():
    curve = dg.forecast_skill(perfect_model_run(), [0, 1, 2, 4, 8])
    np.testing.assert_allclose(curve.rmse, 0.0, atol=1e-12)


def test_persistence_error_grows_with_lead():
    curve = dg.forecast_skill(perfect_model_run(), [0, 1, 2, 3, 4], kind="persistence")
    assert curve.rmse[0] == 0
    assert np.all(np.diff(curve.rmse) > 0)


def test_skill_lead_validation():
    run = perfect_model_run()
    with pytest.raises(ContractViolation):
        dg.forecast_skill(run, [2, 1])
    with pytest.raises(ContractViolation):
        dg.forecast_skill(run, [0, 10_000])
    with pytest.raises(ContractViolation):
        dg.forecast_skill(run, [0, 1], kind="oracle")


def test_relative_skill():
    a = dg.SkillCurve("a", np.array([0, 1]), np.array([1.0, 2.0]))
    b = dg.SkillCurve("b", np.array([0, 1]), np.array([0.5, 3.0]))
    np.testing.assert_array_equal(dg.relative_skill(a, a), [0.0, 0.0])
    np.testing.assert_allclose(dg.relative_skill(b, a), [0.5, -0.5])
    with pytest.raises(ContractViolation):
        dg.relative_skill(a, dg.SkillCurve("c", np.array([0, 2]), np.ones(2)))


def test_skill_csv():
    text = dg.SkillCurve("free", np.array([0, 1]), np.array([0.1, 0.2])).to_csv(None, "r", "h")
    assert dg.parse_header(text)["metric"] == "forecast_rmse_free"


# -- forcing variability ----------------------------------------------------------------------------

def test_constant_eta_ratio_zero():
    ev = dg.eta_variability(np.full((10, 4), 0.3))
    np.testing.assert_allclose(ev.ratio, 0.0, atol=1e-12)
    assert ev.median < 1e-12 and not ev.undefined


def test_alternating_eta_ratio():
    alt = np.where(np.arange(200) % 2 == 0, 1.0, -1.0)[:, None]
    ev = dg.eta_variability(1 + 0.1 * alt * np.ones((1, 3)))
    # sample std with ddof=1 over an even count of +-0.1: 0.1 * sqrt(n / (n - 1))
    np.testing.assert_allclose(ev.ratio, 0.1 * np.sqrt(200 / 199), rtol=1e-12)
    assert ev.median == pytest.approx(0.1, rel=0.01)


def test_eta_points_with_zero_mean_excluded():
    eta = np.zeros((6, 3))
    eta[:, 0] = 2.0
    ev = dg.eta_variability(eta)
    np.testing.assert_array_equal(ev.excluded, [False, True, True])
    assert ev.median == 0.0
    ev0 = dg.eta_variability(np.zeros((5, 3)))
    assert ev0.undefined and np.isnan(ev0.median)
    with pytest.raises(InsufficientSamples):
        dg.eta_variability(np.ones((1, 3)))


def test_eta_variability_reads_archive_after_spinup():
    eta = np.vstack([np.full((3, 4), 50.0), np.full((4, 4), 1.0)])
    run = synthetic_run(np.zeros((7, 4)), np.zeros((7, 4)), eta=eta, spinup=3)
    assert dg.eta_variability(run).median == 0.0
    assert dg.eta_variability(run, spinup=0).median > 0


# -- purity ---------------------------------------------------------------------------------------

def test_diagnostics_do_not_mutate_archive(tmp_path):
    cfg = ExperimentConfig().with_(**{"model.n": 12, "assim.windows": 6, "assim.spinup_windows": 1,
                                      "truth.spinup_steps": 100})
    run = run_cycle(cfg, path=tmp_path / "r")
    before = run.content_hash()
    tables = [dg.increment_stats(run)[1].to_csv(), dg.departure_stats(run).to_csv(),
              dg.forecast_skill(run, [0, 1, 2]).to_csv()]
    again = [dg.increment_stats(tmp_path / "r")[1].to_csv(), dg.departure_stats(tmp_path / "r").to_csv(),
             dg.forecast_skill(tmp_path / "r", [0, 1, 2]).to_csv()]
    assert tables == again
    assert run.content_hash() == before
