"""Deterministic generator of physically plausible decay tracks.

Objects decay under drag alone: ``da/dt = -sqrt(mu*a) * rho(h) * B`` with a
piecewise exponential atmosphere scaled by the solar flux level, integrated
with fixed-step RK4 until the 80 km re-entry altitude. Mean-element records
are emitted at a configurable cadence with seeded Gaussian noise and
optional labeled outlier spikes, so filter recall and end-to-end pipeline
accuracy are measurable against exact ground truth.

This generator exists to exercise the pipeline; its atmosphere is
deliberately simple.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from orbdecay.errors import ConfigError, InputError
from orbdecay.features import SpaceWeatherSeries
from orbdecay.tle_data import ObjectTrack, TleRecord, days_to_iso, make_track
from orbdecay.trajectory import (
    EARTH_RADIUS_KM,
    MU_EARTH_KM3_S2,
    bstar_from_ballistic,
    mean_motion_from_altitude,
)

DRAG_COEFFICIENT = 2.2
REFERENCE_FLUX = 150.0

# Piecewise exponential atmosphere: (base altitude km, density kg/m^3,
# scale height km). Standard tabulation for 0-1000 km.
ATMOSPHERE_TABLE = (
    (0.0, 1.225, 7.249),
    (25.0, 3.899e-2, 6.349),
    (30.0, 1.774e-2, 6.682),
    (40.0, 3.972e-3, 7.554),
    (50.0, 1.057e-3, 8.382),
    (60.0, 3.206e-4, 7.714),
    (70.0, 8.770e-5, 6.549),
    (80.0, 1.905e-5, 5.799),
    (90.0, 3.396e-6, 5.382),
    (100.0, 5.297e-7, 5.877),
    (110.0, 9.661e-8, 7.263),
    (120.0, 2.438e-8, 9.473),
    (130.0, 8.484e-9, 12.636),
    (140.0, 3.845e-9, 16.149),
    (150.0, 2.070e-9, 22.523),
    (180.0, 5.464e-10, 29.740),
    (200.0, 2.789e-10, 37.105),
    (250.0, 7.248e-11, 45.546),
    (300.0, 2.418e-11, 53.628),
    (350.0, 9.518e-12, 53.298),
    (400.0, 3.725e-12, 58.515),
    (450.0, 1.585e-12, 60.828),
    (500.0, 6.967e-13, 63.822),
    (600.0, 1.454e-13, 71.835),
    (700.0, 3.614e-14, 88.667),
    (800.0, 1.170e-14, 124.64),
    (900.0, 5.245e-15, 181.05),
    (1000.0, 3.019e-15, 268.00),
)

_BASE_ALT = np.array([row[0] for row in ATMOSPHERE_TABLE])
_BASE_RHO = np.array([row[1] for row in ATMOSPHERE_TABLE])
_SCALE_H = np.array([row[2] for row in ATMOSPHERE_TABLE])


class NonDecayingOrbit(ConfigError):
    """An object failed to reach the re-entry altitude within the horizon."""


def atmosphere_density(altitude_km: np.ndarray | float) -> np.ndarray | float:
    """Density (kg/m^3) of the piecewise exponential atmosphere."""
    h = np.asarray(altitude_km, dtype=float)
    idx = np.clip(np.searchsorted(_BASE_ALT, h, side="right") - 1, 0, len(_BASE_ALT) - 1)
    rho = _BASE_RHO[idx] * np.exp(-(h - _BASE_ALT[idx]) / _SCALE_H[idx])
    return float(rho) if np.isscalar(altitude_km) else rho


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator knobs: population, physics, sampling, noise, outliers."""

    n_objects: int = 40
    cd_a_over_m_range: tuple[float, float] = (0.01, 0.04)
    initial_altitude_km: float = 198.0
    f107_range: tuple[float, float] = (100.0, 180.0)
    mean_motion_noise: float = 0.0
    eccentricity_noise: float = 0.0
    bstar_noise: float = 0.0
    outlier_rate: float = 0.0
    seed: int = 0
    # Cadence must exceed half an orbital period (~0.031 days at 200 km) or
    # the correction filter treats consecutive records as supersessions; the
    # floor keeps one kilometre of noise margin above the 180 km selection
    # bound.
    cadence_days: float = 0.05
    record_floor_km: float = 181.0
    densify_below_km: float = 150.0
    start_epoch_days: float = 2000.0
    start_spacing_days: float = 30.0
    horizon_days: float = 60.0
    step_seconds: float = 10.0
    reentry_uncertainty_minutes: float = 1.0
    base_eccentricity: float = 0.0012
    base_inclination: float = 51.6

    def __post_init__(self) -> None:
        if self.n_objects < 1:
            raise InputError("need at least one object")
        if min(self.cd_a_over_m_range) <= 0 or min(self.f107_range) <= 0:
            raise InputError("physical ranges must be positive")
        if not 0.0 <= self.outlier_rate <= 1.0:
            raise InputError("outlier rate must lie in [0, 1]")
        if self.record_floor_km <= 80.0 or self.initial_altitude_km <= self.record_floor_km:
            raise InputError("record floor must lie between 80 km and the initial altitude")
        if min(self.cadence_days, self.step_seconds, self.horizon_days) <= 0:
            raise InputError("cadence, step, and horizon must be positive")


@dataclass(frozen=True)
class GroundTruth:
    """Exact decay parameters of one generated object."""

    decay_epoch: float
    cd_a_over_m: float
    f107: float


@dataclass(frozen=True)
class OutlierLabel:
    """One injected spike: the record epoch and the element spiked."""

    epoch: float
    element: str


@dataclass
class SyntheticDataset:
    tracks: list[ObjectTrack]
    ground_truth: dict[int, GroundTruth]
    space_weather: SpaceWeatherSeries
    area_to_mass: dict[int, float]
    outlier_labels: dict[int, list[OutlierLabel]] = field(default_factory=dict)


def _solar_flux_curve(spec: SyntheticSpec, dates: np.ndarray) -> np.ndarray:
    lo, hi = spec.f107_range
    mid, amp = 0.5 * (lo + hi), 0.5 * (hi - lo)
    return mid + amp * np.sin(2.0 * math.pi * dates / 2000.0)


def _integrate_decay(spec: SyntheticSpec, ballistic: np.ndarray, flux: np.ndarray):
    """Vectorized fixed-step RK4 of the semi-major axis for all objects.

    Returns (times_days [steps], altitudes [steps x objects], crossing_days
    [objects]); altitudes after an object's crossing hold the re-entry value.
    """
    n = len(ballistic)
    dt = spec.step_seconds
    effective = ballistic * flux / REFERENCE_FLUX

    def rate(a: np.ndarray) -> np.ndarray:
        # Intermediate RK4 stages can overshoot far below the re-entry
        # altitude where the decay rate explodes; clamping keeps the stage
        # evaluations finite without affecting the tracked regime.
        a_safe = np.maximum(a, EARTH_RADIUS_KM)
        h = a_safe - EARTH_RADIUS_KM
        # km^2/s * kg/m^3 * m^2/kg = 1e3 km/s
        return -np.sqrt(MU_EARTH_KM3_S2 * a_safe) * atmosphere_density(h) * effective * 1e3

    a = np.full(n, EARTH_RADIUS_KM + spec.initial_altitude_km)
    active = np.ones(n, dtype=bool)
    crossing = np.full(n, np.nan)
    max_steps = int(spec.horizon_days * 86400.0 / dt) + 1
    altitudes = [a - EARTH_RADIUS_KM]
    times = [0.0]
    floor = EARTH_RADIUS_KM + 80.0
    for step in range(1, max_steps + 1):
        k1 = rate(a)
        k2 = rate(a + 0.5 * dt * k1)
        k3 = rate(a + 0.5 * dt * k2)
        k4 = rate(a + dt * k3)
        a_next = a + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t_next = step * dt
        crossed = active & (a_next <= floor)
        if crossed.any():
            # Locate the 80 km crossing by linear interpolation in the step.
            frac = (a[crossed] - floor) / (a[crossed] - a_next[crossed])
            crossing[crossed] = (t_next - dt + frac * dt) / 86400.0
            active[crossed] = False
        a = np.where(active, a_next, floor)
        altitudes.append(a - EARTH_RADIUS_KM)
        times.append(t_next / 86400.0)
        if not active.any():
            break
    if active.any():
        bad = int(np.nonzero(active)[0][0])
        raise NonDecayingOrbit(
            f"object index {bad} did not reach 80 km within {spec.horizon_days} days"
        )
    return np.array(times), np.vstack(altitudes), crossing


def _record_times(spec: SyntheticSpec, times: np.ndarray, altitude: np.ndarray) -> list[float]:
    """Cadence epochs (relative days) while above the record floor, denser
    below the densify altitude."""
    out: list[float] = []
    t = 0.0
    end = times[-1]
    while t <= end:
        h = float(np.interp(t, times, altitude))
        if h < spec.record_floor_km:
            break
        out.append(t)
        step = spec.cadence_days / 10.0 if h < spec.densify_below_km else spec.cadence_days
        t += step
    return out


def _spike_positions(
    rng: np.random.Generator, count: int, rate: float, margin: int, separation: int
) -> list[int]:
    """Isolated injection positions, kept clear of unscreenable margins."""
    eligible = list(range(margin, count - margin))
    positions: list[int] = []
    for pos in eligible:
        if rng.random() < rate and all(abs(pos - p) >= separation for p in positions):
            positions.append(pos)
    return positions


def generate_tracks(spec: SyntheticSpec) -> SyntheticDataset:
    """Generate decaying objects, their records, and exact ground truth.

    Outlier spikes (when enabled) are sized at ten times the screening
    tolerance of the matching filter and land only where a full screening
    window exists, so recall against the labels is well-defined.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.n_objects
    ballistic = rng.uniform(*spec.cd_a_over_m_range, size=n)
    starts = spec.start_epoch_days + spec.start_spacing_days * np.arange(n)

    sw_dates = np.arange(
        starts.min() - 100.0, starts.max() + spec.horizon_days + 100.0, 1.0
    )
    sw_values = _solar_flux_curve(spec, sw_dates)
    space_weather = SpaceWeatherSeries(sw_dates, sw_values)
    flux = np.interp(starts, sw_dates, sw_values)

    times, altitudes, crossings = _integrate_decay(spec, ballistic, flux)

    tracks: list[ObjectTrack] = []
    ground_truth: dict[int, GroundTruth] = {}
    area_to_mass: dict[int, float] = {}
    outlier_labels: dict[int, list[OutlierLabel]] = {}
    for i in range(n):
        norad = 90000 + i
        profile = altitudes[:, i]
        rel_times = _record_times(spec, times, profile)
        records: list[TleRecord] = []
        for rel in rel_times:
            h = float(np.interp(rel, times, profile))
            mm = mean_motion_from_altitude(h)
            mm += rng.normal() * spec.mean_motion_noise
            ecc = abs(spec.base_eccentricity + rng.normal() * spec.eccentricity_noise)
            incl = spec.base_inclination + rng.normal() * 0.01
            bstar = bstar_from_ballistic(ballistic[i]) * (
                1.0 + rng.normal() * spec.bstar_noise
            )
            records.append(
                TleRecord(
                    norad_id=norad,
                    epoch=starts[i] + rel,
                    mean_motion=mm,
                    eccentricity=min(ecc, 0.0999),
                    inclination=incl,
                    bstar=bstar,
                    raan=float(rng.uniform(0.0, 360.0)),
                    arg_perigee=float(rng.uniform(0.0, 360.0)),
                    mean_anomaly=float(rng.uniform(0.0, 360.0)),
                )
            )

        labels: list[OutlierLabel] = []
        if spec.outlier_rate > 0 and len(records) > 16:
            labels = _inject_outliers(spec, rng, records)
        if labels:
            outlier_labels[norad] = labels

        tracks.append(
            make_track(
                norad,
                records,
                reentry_epoch=float(starts[i] + crossings[i]),
                reentry_uncertainty=spec.reentry_uncertainty_minutes,
            )
        )
        ground_truth[norad] = GroundTruth(
            decay_epoch=float(starts[i] + crossings[i]),
            cd_a_over_m=float(ballistic[i]),
            f107=float(flux[i]),
        )
        area_to_mass[norad] = float(ballistic[i] / DRAG_COEFFICIENT)

    return SyntheticDataset(
        tracks=tracks,
        ground_truth=ground_truth,
        space_weather=space_weather,
        area_to_mass=area_to_mass,
        outlier_labels=outlier_labels,
    )


def _inject_outliers(
    spec: SyntheticSpec, rng: np.random.Generator, records: list[TleRecord]
) -> list[OutlierLabel]:
    """Replace a few records with spiked copies; returns their labels."""
    from dataclasses import replace as dc_replace

    labels: list[OutlierLabel] = []
    window = 8

    mm_positions = _spike_positions(rng, len(records), spec.outlier_rate, window, window)
    for pos in mm_positions:
        rec = records[pos]
        tolerance = max(1e-4, 1e-3 * rec.mean_motion)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        records[pos] = dc_replace(rec, mean_motion=rec.mean_motion + sign * 10.0 * tolerance)
        labels.append(OutlierLabel(epoch=rec.epoch, element="mean_motion"))

    taken = set(mm_positions)
    stat_positions = [
        p
        for p in _spike_positions(rng, len(records), spec.outlier_rate, window, window)
        if all(abs(p - q) >= window for q in taken)
    ]
    for pos in stat_positions:
        rec = records[pos]
        noise = max(spec.eccentricity_noise, 1e-6)
        spike = 10.0 * 5.0 * noise  # ten times the MAD-threshold scale
        if rng.random() < 0.5:
            records[pos] = dc_replace(
                rec, eccentricity=min(rec.eccentricity + spike, 0.0999)
            )
            labels.append(OutlierLabel(epoch=rec.epoch, element="eccentricity"))
        else:
            records[pos] = dc_replace(rec, inclination=rec.inclination + spike * 100.0)
            labels.append(OutlierLabel(epoch=rec.epoch, element="inclination"))
    return labels


def write_omm_csv(tracks: list[ObjectTrack], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            [
                "NORAD_CAT_ID",
                "EPOCH",
                "MEAN_MOTION",
                "ECCENTRICITY",
                "INCLINATION",
                "RA_OF_ASC_NODE",
                "ARG_OF_PERICENTER",
                "MEAN_ANOMALY",
                "BSTAR",
            ]
        )
        for track in tracks:
            for r in track.records:
                writer.writerow(
                    [
                        r.norad_id,
                        days_to_iso(r.epoch, microseconds=True),
                        repr(r.mean_motion),
                        repr(r.eccentricity),
                        repr(r.inclination),
                        repr(r.raan),
                        repr(r.arg_perigee),
                        repr(r.mean_anomaly),
                        repr(r.bstar),
                    ]
                )


def write_tip_csv(tracks: list[ObjectTrack], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["NORAD_CAT_ID", "DECAY_EPOCH", "WINDOW_MINUTES"])
        for track in tracks:
            writer.writerow(
                [
                    track.norad_id,
                    days_to_iso(track.reentry_epoch, microseconds=True),
                    repr(float(track.reentry_uncertainty)),
                ]
            )


def write_ground_truth_csv(dataset: SyntheticDataset, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["NORAD_CAT_ID", "DECAY_EPOCH", "CD_A_OVER_M", "F107"])
        for norad in sorted(dataset.ground_truth):
            truth = dataset.ground_truth[norad]
            writer.writerow(
                [
                    norad,
                    days_to_iso(truth.decay_epoch, microseconds=True),
                    repr(truth.cd_a_over_m),
                    repr(truth.f107),
                ]
            )


def write_space_weather_csv(sw: SpaceWeatherSeries, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["DATE", "F107_OBS", "F107_81DAY"])
        for date, value in zip(sw.dates, sw.f107_81day):
            writer.writerow(
                [days_to_iso(float(date), microseconds=True), repr(float(value)), repr(float(value))]
            )


def write_metadata_csv(area_to_mass: dict[int, float], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["NORAD_CAT_ID", "AREA_TO_MASS"])
        for norad in sorted(area_to_mass):
            writer.writerow([norad, repr(area_to_mass[norad])])
