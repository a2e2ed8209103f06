import math

import numpy as np
import pytest

from orbdecay.tle_data import TleRecord
from orbdecay.trajectory import (
    EARTH_RADIUS_KM,
    FitCoefficients,
    MU_EARTH_KM3_S2,
    NonMonotoneFit,
    NonPositiveMeanMotion,
    TooFewSamples,
    altitude_from_mean_motion,
    ballistic_from_bstar,
    bstar_from_ballistic,
    evaluate_fit,
    fit_decay_curve,
    grid_altitudes,
    mean_altitude,
    mean_motion_from_altitude,
    sample_grid,
)


def known_coefficients(a2=30.0, a3=-10.0, a4=5.0, t_ref=3.0) -> FitCoefficients:
    return FitCoefficients(a2=a2, a3=a3, a4=a4, t_ref=t_ref)


def curve(coeffs: FitCoefficients, t: float) -> float:
    tau = coeffs.t_ref - t
    return (
        coeffs.a1
        + coeffs.a2 * tau ** 0.5
        + coeffs.a3 * tau ** (1.0 / 3.0)
        + coeffs.a4 * tau ** 0.25
    )


class TestMeanAltitude:
    def test_round_trip_at_200km(self):
        mm = mean_motion_from_altitude(200.0)
        assert altitude_from_mean_motion(mm) == pytest.approx(200.0, abs=1e-9)

    def test_known_value_16_rev_per_day(self):
        # Independent full-precision evaluation of Kepler's third law.
        n_rad = 16.0 * 2.0 * math.pi / 86400.0
        a = (MU_EARTH_KM3_S2 / n_rad**2) ** (1.0 / 3.0)
        expected = a - EARTH_RADIUS_KM
        assert expected == pytest.approx(274.42, abs=0.01)
        record = TleRecord(
            norad_id=1, epoch=0.0, mean_motion=16.0, eccentricity=0.001,
            inclination=51.6, bstar=1e-4,
        )
        assert mean_altitude(record) == pytest.approx(expected, rel=1e-14)
        assert mean_altitude(record) == pytest.approx(274.4207013275309)

    def test_zero_mean_motion_raises(self):
        with pytest.raises(NonPositiveMeanMotion):
            altitude_from_mean_motion(0.0)


class TestDragConversion:
    def test_round_trip(self):
        b = 0.02
        assert ballistic_from_bstar(bstar_from_ballistic(b)) == pytest.approx(b, rel=1e-15)

    def test_reference_value(self):
        assert bstar_from_ballistic(0.02) == pytest.approx(
            0.5 * 0.02 * 2.461e-5 * 6378.135, rel=1e-15
        )


class TestFitDecayCurve:
    def test_recovers_known_coefficients(self):
        truth = known_coefficients()
        times = np.linspace(0.0, 2.9, 40)
        samples = [(float(t), curve(truth, float(t))) for t in times]
        fitted = fit_decay_curve(samples, truth.t_ref)
        assert fitted.converged
        assert abs(fitted.a2 - truth.a2) < 1e-6
        assert abs(fitted.a3 - truth.a3) < 1e-6
        assert abs(fitted.a4 - truth.a4) < 1e-6

    def test_value_at_t_ref_is_reference_altitude(self):
        truth = known_coefficients()
        samples = [(float(t), curve(truth, float(t))) for t in np.linspace(0, 2.9, 10)]
        fitted = fit_decay_curve(samples, truth.t_ref)
        assert evaluate_fit(fitted, fitted.t_ref) == 80.0

    def test_too_few_samples(self):
        truth = known_coefficients()
        samples = [(0.0, curve(truth, 0.0)), (1.0, curve(truth, 1.0))]
        with pytest.raises(TooFewSamples):
            fit_decay_curve(samples, truth.t_ref)

    def test_samples_above_ceiling_excluded(self):
        truth = known_coefficients(a2=80.0)
        times = np.linspace(0.0, 2.9, 40)
        samples = [(float(t), curve(truth, float(t))) for t in times]
        below = [s for s in samples if s[1] < 240.0]
        assert len(below) >= 3
        fitted = fit_decay_curve(samples, truth.t_ref)
        refit = fit_decay_curve(below, truth.t_ref)
        assert fitted.a2 == pytest.approx(refit.a2, abs=1e-9)

    def test_noisy_fit_recovers_curve(self):
        # The fractional-power basis is collinear, so under noise the
        # individual coefficients are ill-determined while the curve itself
        # is well determined; assert on the curve.
        truth = known_coefficients()
        rng = np.random.default_rng(0)
        times = np.linspace(0.0, 2.9, 60)
        samples = [
            (float(t), curve(truth, float(t)) + float(rng.normal(scale=0.5)))
            for t in times
        ]
        fitted = fit_decay_curve(samples, truth.t_ref)
        assert fitted.converged
        dense = np.linspace(0.0, 2.9, 500)
        rms = np.sqrt(
            np.mean((evaluate_fit(fitted, dense) - evaluate_fit(truth, dense)) ** 2)
        )
        assert rms < 0.5


class TestSampleGrid:
    def test_endpoints(self):
        traj = sample_grid(known_coefficients(), norad_id=9)
        assert traj.grid_altitudes[0] == 200.0
        assert traj.grid_altitudes[-1] == 80.0
        assert traj.grid_times[-1] == known_coefficients().t_ref
        assert traj.residual_times()[0] == 0.0
        assert len(traj.grid_altitudes) == 25

    def test_grid_spacing_is_uniform_5km(self):
        altitudes = grid_altitudes()
        assert np.allclose(np.diff(altitudes), -5.0)

    def test_mid_grid_times_match_dense_tabulation(self):
        # Oracle: dense forward tabulation of the curve plus inverse lookup.
        coeffs = known_coefficients()
        traj = sample_grid(coeffs)
        dense_t = np.linspace(traj.grid_times[0] - 0.5, coeffs.t_ref, 2_000_001)
        dense_h = evaluate_fit(coeffs, dense_t)
        for i in (5, 12, 18):
            target = traj.grid_altitudes[i]
            oracle_t = float(np.interp(-target, -dense_h, dense_t))
            assert abs(traj.grid_times[i] - oracle_t) < 1e-8

    def test_grid_times_strictly_increasing(self):
        traj = sample_grid(known_coefficients())
        assert (np.diff(traj.grid_times) > 0).all()

    def test_round_trip_refit_from_grid(self):
        truth = known_coefficients()
        traj = sample_grid(truth)
        samples = [
            (float(t), float(h))
            for t, h in zip(traj.grid_times, traj.grid_altitudes)
        ]
        refit = fit_decay_curve(samples, truth.t_ref)
        assert abs(refit.a2 - truth.a2) < 1e-6
        assert abs(refit.a3 - truth.a3) < 1e-6
        assert abs(refit.a4 - truth.a4) < 1e-6

    def test_non_monotone_curve_rejected(self):
        # Coefficients chosen so the curve dips and rises within the band.
        bad = FitCoefficients(a2=120.0, a3=-260.0, a4=160.0, t_ref=3.0)
        values = evaluate_fit(bad, np.linspace(0.0, 3.0, 1000))
        assert (np.diff(values) > 0).any()
        with pytest.raises(NonMonotoneFit):
            sample_grid(bad)
