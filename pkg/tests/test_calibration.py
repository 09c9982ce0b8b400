import math

import numpy as np
import pytest
from sklearn.base import clone

from cirsv.calibration import (
    BUSINESS_DAY, DispersionKDE, RateSeries, WindowedDispersionMLE, fit_drift, kde, load_csv,
    mle_dispersion, synth_series,
)
from cirsv.errors import (
    InsufficientDataError, InvalidParametersError, NegativeRateError, NonMonotoneTimestampsError,
    SeriesFormatError,
)
from cirsv.expansion import CIRParams
from cirsv.volprocess import VolParams


def euler_cir(n, sigma2, kappa=5.0, theta=0.03, dt=BUSINESS_DAY, seed=0, substeps=20):
    """Plain CIR path with constant dispersion, sampled every ``dt``."""
    rng = np.random.default_rng(seed)
    h = dt / substeps
    r = np.empty(n)
    x = theta
    for i in range(n):
        r[i] = x
        z = rng.standard_normal(substeps)
        for zj in z:
            x = max(x + kappa * (theta - x) * h + math.sqrt(sigma2 * max(x, 0.0) * h) * zj, 0.0)
    return RateSeries(np.arange(n) * dt, r, "test")


@pytest.fixture(scope="module")
def control_path():
    return euler_cir(10_000, 0.075, seed=1)


def test_noise_free_path_has_zero_dispersion():
    r = [0.08]
    for _ in range(199):
        r.append(r[-1] + 5.0 * (0.03 - r[-1]) * BUSINESS_DAY)
    series = RateSeries(np.arange(200) * BUSINESS_DAY, np.array(r), "test")
    for mode in ("global", "window"):
        est = mle_dispersion(series, drift=mode)
        assert np.max(est.sigma2_hats) < 1e-20
    kappa, theta = fit_drift(series.rates, BUSINESS_DAY)
    assert kappa == pytest.approx(5.0, rel=1e-8) and theta == pytest.approx(0.03, rel=1e-8)


def test_constant_dispersion_is_recovered(control_path):
    est = mle_dispersion(control_path)
    assert len(est) == 500
    assert est.sigma2_hats.mean() == pytest.approx(0.075, rel=0.03)


def test_estimator_is_consistent(control_path):
    # spread of the window mean shrinks with the number of windows
    short = mle_dispersion(RateSeries(control_path.timestamps[:1000], control_path.rates[:1000], "t"))
    full = mle_dispersion(control_path)
    se_short = short.sigma2_hats.std(ddof=1) / math.sqrt(len(short))
    se_full = full.sigma2_hats.std(ddof=1) / math.sqrt(len(full))
    assert se_full < 0.5 * se_short
    assert abs(full.sigma2_hats.mean() - 0.075) < 4 * se_full


def test_per_window_drift_is_biased_low(control_path):
    window = mle_dispersion(control_path, drift="window")
    glob = mle_dispersion(control_path, drift="global")
    assert window.sigma2_hats.mean() < glob.sigma2_hats.mean()
    assert window.sigma2_hats.mean() == pytest.approx(0.075 * 0.92, rel=0.05)


def test_window_edge_cases(control_path):
    with pytest.raises(InvalidParametersError):
        mle_dispersion(control_path, window=3)
    with pytest.raises(InvalidParametersError):
        mle_dispersion(control_path, drift="local")
    short = RateSeries(np.arange(10) * BUSINESS_DAY, np.full(10, 0.03), "t")
    with pytest.raises(InsufficientDataError):
        mle_dispersion(short, window=20)
    # windows sitting at zero are dropped, not estimated
    r = control_path.rates[:400].copy()
    r[:20] = 0.0
    est = mle_dispersion(RateSeries(control_path.timestamps[:400], r, "t"))
    assert est.dropped == (0,) and len(est) == 19


def test_series_validation():
    with pytest.raises(NonMonotoneTimestampsError):
        RateSeries(np.array([0.0, 1.0, 1.0]), np.ones(3), "t")
    with pytest.raises(NegativeRateError):
        RateSeries(np.arange(3.0), np.array([0.01, -0.01, 0.02]), "t")


def test_kde_is_normalized():
    rng = np.random.default_rng(0)
    curve = kde(rng.gamma(4.0, 0.02, 500))
    assert curve.mass() == pytest.approx(1.0, abs=1e-6)
    assert curve.n_modes == 1


def test_kde_equal_estimates_give_one_spike():
    curve = kde(np.full(50, 0.07))
    assert curve.n_modes == 1
    assert curve.peaks[0] == pytest.approx(0.07, abs=curve.bandwidth)
    assert curve.mass() == pytest.approx(1.0, abs=1e-6)


def test_kde_two_clusters():
    rng = np.random.default_rng(4)
    x = np.concatenate([rng.normal(0.03, 0.004, 300), rng.normal(0.1, 0.004, 300)])
    curve = kde(x)
    assert curve.n_modes == 2
    np.testing.assert_allclose(np.sort(curve.peaks), [0.03, 0.1], atol=0.005)
    with pytest.raises(InsufficientDataError):
        kde(x[:5])


def test_synthetic_series_shapes():
    vol = VolParams(epsilon=1.0)
    s = synth_series(vol, CIRParams(), days=50, seed=3)
    assert len(s) == 51 and s.hidden_y.shape == (51,)
    assert np.all(s.rates >= 0)
    again = synth_series(vol, CIRParams(), days=50, seed=3)
    assert np.array_equal(s.rates, again.rates)


def test_load_csv_variants(tmp_path):
    p = tmp_path / "rates.csv"
    p.write_text("date,rate\n2020-01-02,3.0\n2020-01-03,3.1\n\n2020-01-06,2.9\n")
    s = load_csv(p, scale=0.01)
    np.testing.assert_allclose(s.rates, [0.03, 0.031, 0.029])
    np.testing.assert_allclose(s.timestamps, np.arange(3) * BUSINESS_DAY)
    q = tmp_path / "plain.csv"
    q.write_text("0,0.03\n1,0.031\n2,0.029\n")
    assert len(load_csv(q)) == 3


@pytest.mark.parametrize("body, error, line", [
    ("t,r\n0,0.03\n1,-0.01\n", NegativeRateError, 3),
    ("t,r\n0,0.03\n0,0.02\n", NonMonotoneTimestampsError, 3),
    ("t,r\n0,0.03\n1,abc\n", SeriesFormatError, 3),
    ("0,0.03,7\n", SeriesFormatError, 1),
    ("t,r\nyesterday,0.03\n", SeriesFormatError, 2),
])
def test_load_csv_errors_report_lines(tmp_path, body, error, line):
    p = tmp_path / "bad.csv"
    p.write_text(body)
    with pytest.raises(error) as info:
        load_csv(p)
    assert info.value.line == line
    assert f"line {line}" in str(info.value)


def test_estimators(control_path):
    mle = WindowedDispersionMLE(window=25)
    assert clone(mle).get_params()["window"] == 25
    out = mle.fit(control_path.rates).transform(control_path.rates)
    assert out.shape == (400, 1)
    assert mle.n_windows_ == 400
    dens = DispersionKDE().fit(out)
    assert dens.peaks_.size == dens.curve_.n_modes >= 1
    scores = dens.score_samples(np.array([[0.075], [5.0]]))
    assert scores[0] > scores[1]
