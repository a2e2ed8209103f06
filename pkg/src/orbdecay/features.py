"""Feature assembly: per-object feature tensor and diagnostics.

The prediction model consumes a rank-3 tensor [objects x 25 x features]
whose per-step features are the normalized residual time, a step-held
running mean of the drag coefficient, the 81-day solar flux average at the
trajectory start (constant over the sequence), and the object's
area-to-mass ratio (constant). Min-max statistics are learned on the
training split only and reapplied verbatim elsewhere.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from orbdecay.errors import InputError, NumericalError
from orbdecay.tle_data import ObjectTrack
from orbdecay.trajectory import DecayTrajectory

log = logging.getLogger(__name__)

FEATURE_NAMES = ("residual_time", "bstar", "f107_81day", "area_to_mass")
NORMALIZED_FEATURES = ("residual_time", "f107_81day")


class EmptyTrack(InputError):
    """No usable records to build a feature from."""


class OutOfCoverage(InputError):
    """Requested epoch precedes the space-weather series."""


class DegenerateRange(InputError):
    """Cannot fit min-max statistics on a constant array."""


class MissingObjectData(InputError):
    """An object lacks one of the inputs required for tensor assembly."""

    def __init__(self, norad_id: int, what: str):
        super().__init__(f"object {norad_id}: missing {what}")
        self.norad_id = norad_id


class DegenerateFeature(InputError):
    """A zero-variance column cannot be standardized."""


@dataclass(frozen=True)
class SpaceWeatherSeries:
    """81-day averaged 10.7 cm solar flux, sampled on increasing dates."""

    dates: np.ndarray
    f107_81day: np.ndarray

    def __post_init__(self) -> None:
        if len(self.dates) != len(self.f107_81day):
            raise InputError("space weather dates/values length mismatch")
        if np.any(np.diff(self.dates) <= 0):
            raise InputError("space weather dates must be strictly increasing")
        if np.any(np.asarray(self.f107_81day) <= 0):
            raise InputError("solar flux values must be positive")

    @staticmethod
    def from_csv(path: str) -> "SpaceWeatherSeries":
        from orbdecay.tle_data import epoch_to_days

        dates, values = [], []
        with open(path, "r", encoding="utf-8") as handle:
            for row in csv.DictReader(handle):
                try:
                    dates.append(epoch_to_days(row["DATE"]))
                    values.append(float(row["F107_81DAY"]))
                except (KeyError, ValueError) as exc:
                    raise InputError(f"{path}: bad space weather row: {exc}") from None
        return SpaceWeatherSeries(np.array(dates), np.array(values))


def bstar_feature(
    track: ObjectTrack,
    grid_times: np.ndarray,
    window: int | None = None,
) -> np.ndarray:
    """Sample the running-mean drag coefficient at the grid epochs.

    A cumulative mean over the record history is built (or a trailing moving
    average of ``window`` records when given), then step-interpolated: the
    preceding value is held constant between records, and epochs before the
    first record take the first value.
    """
    if not track.records:
        raise EmptyTrack(f"object {track.norad_id} has no records")
    epochs = np.array([r.epoch for r in track.records])
    values = np.array([r.bstar for r in track.records])
    if window is None:
        means = np.cumsum(values) / np.arange(1, len(values) + 1)
    else:
        means = np.array(
            [values[max(0, i + 1 - window) : i + 1].mean() for i in range(len(values))]
        )
    idx = np.searchsorted(epochs, grid_times, side="right") - 1
    idx = np.clip(idx, 0, len(means) - 1)
    return means[idx]


def solar_feature(sw: SpaceWeatherSeries, start_epoch: float) -> float:
    """Flux value in force at ``start_epoch``: latest series date <= epoch."""
    idx = int(np.searchsorted(sw.dates, start_epoch, side="right")) - 1
    if idx < 0:
        raise OutOfCoverage(
            f"epoch {start_epoch} precedes space weather coverage start {sw.dates[0]}"
        )
    return float(sw.f107_81day[idx])


def minmax_normalize(
    values: np.ndarray, stats: tuple[float, float] | None = None
) -> tuple[np.ndarray, tuple[float, float]]:
    """Scale to [0, 1] by min-max; with supplied stats, apply them verbatim.

    Values outside the fitted range map outside [0, 1] by design, so
    statistics learned on the training split can be reused unchanged.
    """
    arr = np.asarray(values, dtype=float)
    if stats is None:
        lo, hi = float(arr.min()), float(arr.max())
        if hi <= lo:
            raise DegenerateRange(f"constant array (value {lo}) has no range to scale")
    else:
        lo, hi = stats
    return (arr - lo) / (hi - lo), (lo, hi)


def minmax_denormalize(values: np.ndarray, stats: tuple[float, float]) -> np.ndarray:
    lo, hi = stats
    return np.asarray(values, dtype=float) * (hi - lo) + lo


@dataclass
class FeatureTensor:
    """Model-ready dataset: features, targets, and bookkeeping per object.

    ``data`` is [objects x 25 x features] with columns in ``FEATURE_NAMES``
    order; ``targets`` holds residual times in days. ``origin_epochs`` are
    the absolute epochs of the 200 km crossing, kept so predictions can be
    mapped back to calendar time. ``train_mask`` marks the objects whose
    values produced ``norm_stats``.
    """

    data: np.ndarray
    feature_names: tuple[str, ...]
    norm_stats: dict[str, tuple[float, float] | None]
    targets: np.ndarray
    area_to_mass: np.ndarray
    norad_ids: np.ndarray
    train_mask: np.ndarray
    origin_epochs: np.ndarray

    def __post_init__(self) -> None:
        n, steps, width = self.data.shape
        if steps != 25 or width != len(self.feature_names):
            raise InputError(f"bad tensor shape {self.data.shape}")
        if self.targets.shape != (n, 25):
            raise InputError("targets shape must be [objects x 25]")

    def index_of(self, norad_id: int) -> int:
        hits = np.nonzero(self.norad_ids == norad_id)[0]
        if hits.size == 0:
            raise MissingObjectData(norad_id, "tensor entry")
        return int(hits[0])

    def time_stats(self) -> tuple[float, float]:
        stats = self.norm_stats.get("residual_time")
        if stats is None:
            raise InputError("tensor lacks residual-time normalization statistics")
        return stats

    def save(self, path: str) -> None:
        payload = {
            "schema": "orbdecay-feature-tensor/1",
            "shape": list(self.data.shape),
            "feature_names": list(self.feature_names),
            "norm_stats": {
                k: (list(v) if v is not None else None)
                for k, v in self.norm_stats.items()
            },
            "norad_ids": [int(x) for x in self.norad_ids],
            "train_mask": [bool(x) for x in self.train_mask],
            "origin_epochs": [float(x) for x in self.origin_epochs],
            "area_to_mass": [float(x) for x in self.area_to_mass],
            "targets": self.targets.tolist(),
            "data": self.data.tolist(),
        }
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(payload, handle, sort_keys=True)
            handle.write("\n")

    @staticmethod
    def load(path: str) -> "FeatureTensor":
        with open(path, "r", encoding="utf-8") as handle:
            payload = json.load(handle)
        if payload.get("schema") != "orbdecay-feature-tensor/1":
            raise InputError(f"{path}: not a feature tensor file")
        return FeatureTensor(
            data=np.array(payload["data"], dtype=float),
            feature_names=tuple(payload["feature_names"]),
            norm_stats={
                k: (tuple(v) if v is not None else None)
                for k, v in payload["norm_stats"].items()
            },
            targets=np.array(payload["targets"], dtype=float),
            area_to_mass=np.array(payload["area_to_mass"], dtype=float),
            norad_ids=np.array(payload["norad_ids"], dtype=int),
            train_mask=np.array(payload["train_mask"], dtype=bool),
            origin_epochs=np.array(payload["origin_epochs"], dtype=float),
        )


def assemble_tensor(
    trajectories: Sequence[DecayTrajectory],
    tracks: Mapping[int, ObjectTrack],
    sw: SpaceWeatherSeries,
    area_to_mass: Mapping[int, float],
    train_ids: set[int],
    bstar_window: int | None = None,
) -> FeatureTensor:
    """Assemble the rank-3 feature tensor from per-object inputs.

    Normalization statistics for the residual time and the solar flux are
    fitted over the training objects only. Objects missing an area-to-mass
    entry receive the training-set median (logged).
    """
    n = len(trajectories)
    if n == 0:
        raise InputError("no trajectories to assemble")
    ids = np.array([traj.norad_id for traj in trajectories], dtype=int)
    train_mask = np.array([int(i) in train_ids for i in ids], dtype=bool)
    if not train_mask.any():
        raise InputError("training split is empty; cannot fit normalization stats")

    residual = np.stack([traj.residual_times() for traj in trajectories])
    origins = np.array([traj.grid_times[0] for traj in trajectories])

    bstars = np.empty((n, 25))
    flux = np.empty(n)
    for i, traj in enumerate(trajectories):
        track = tracks.get(traj.norad_id)
        if track is None:
            raise MissingObjectData(traj.norad_id, "pruned track")
        bstars[i] = bstar_feature(track, traj.grid_times, window=bstar_window)
        try:
            flux[i] = solar_feature(sw, origins[i])
        except OutOfCoverage:
            raise MissingObjectData(traj.norad_id, "space weather coverage") from None

    known_a2m = [
        area_to_mass[int(i)] for i in ids[train_mask] if int(i) in area_to_mass
    ]
    fallback = float(np.median(known_a2m)) if known_a2m else float("nan")
    a2m = np.empty(n)
    for i, norad in enumerate(ids):
        if int(norad) in area_to_mass:
            a2m[i] = area_to_mass[int(norad)]
        else:
            if math.isnan(fallback):
                raise MissingObjectData(int(norad), "area-to-mass ratio")
            log.info(
                "object %d: area-to-mass missing, imputing training median %.6g",
                norad,
                fallback,
            )
            a2m[i] = fallback

    _, time_stats = minmax_normalize(residual[train_mask])
    time_norm, _ = minmax_normalize(residual, time_stats)
    _, flux_stats = minmax_normalize(flux[train_mask])
    flux_norm, _ = minmax_normalize(flux, flux_stats)

    data = np.empty((n, 25, len(FEATURE_NAMES)))
    data[:, :, 0] = time_norm
    data[:, :, 1] = bstars
    data[:, :, 2] = flux_norm[:, None]
    data[:, :, 3] = a2m[:, None]

    return FeatureTensor(
        data=data,
        feature_names=FEATURE_NAMES,
        norm_stats={
            "residual_time": time_stats,
            "bstar": None,
            "f107_81day": flux_stats,
            "area_to_mass": None,
        },
        targets=residual,
        area_to_mass=a2m,
        norad_ids=ids,
        train_mask=train_mask,
        origin_epochs=origins,
    )


@dataclass(frozen=True)
class PcaResult:
    """Principal components of a standardized data matrix.

    ``loadings`` rows are the orthonormal component vectors, sorted by
    descending explained variance.
    """

    loadings: np.ndarray
    explained_variance_ratio: np.ndarray


def _jacobi_eigh(matrix: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations."""
    a = matrix.copy()
    n = a.shape[0]
    vectors = np.eye(n)
    for _ in range(max_sweeps):
        off = math.sqrt(np.sum(a**2) - np.sum(np.diag(a) ** 2))
        if off < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) < tol / (n * n):
                    continue
                theta = 0.5 * math.atan2(2.0 * a[p, q], a[q, q] - a[p, p])
                c, s = math.cos(theta), math.sin(theta)
                rotation = np.eye(n)
                rotation[p, p] = c
                rotation[q, q] = c
                rotation[p, q] = s
                rotation[q, p] = -s
                a = rotation.T @ a @ rotation
                vectors = vectors @ rotation
    return np.diag(a).copy(), vectors


def pca(data: np.ndarray) -> PcaResult:
    """Principal component analysis on the correlation matrix.

    Columns are standardized to zero mean and unit variance before the
    correlation matrix is diagonalized with cyclic Jacobi rotations.
    """
    matrix = np.asarray(data, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] < 2 or matrix.shape[1] < 2:
        raise InputError("pca needs a [samples x features] matrix, >= 2 of each")
    std = matrix.std(axis=0, ddof=1)
    if np.any(std == 0):
        column = int(np.nonzero(std == 0)[0][0])
        raise DegenerateFeature(f"column {column} has zero variance")
    standardized = (matrix - matrix.mean(axis=0)) / std
    correlation = standardized.T @ standardized / (matrix.shape[0] - 1)

    eigenvalues, eigenvectors = _jacobi_eigh(correlation)
    order = np.argsort(eigenvalues)[::-1]
    eigenvalues = np.maximum(eigenvalues[order], 0.0)
    loadings = eigenvectors[:, order].T
    total = eigenvalues.sum()
    if total <= 0:
        raise NumericalError("correlation matrix has no positive eigenvalues")
    return PcaResult(
        loadings=loadings, explained_variance_ratio=eigenvalues / total
    )


def export_trajectories_csv(trajectories: Sequence[DecayTrajectory], path: str) -> None:
    """Write the fitted grids as rows of (norad_id, index, altitude, time)."""
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["norad_id", "grid_index", "altitude_km", "time_days"])
        for traj in trajectories:
            for i in range(len(traj.grid_altitudes)):
                writer.writerow(
                    [
                        traj.norad_id,
                        i,
                        repr(float(traj.grid_altitudes[i])),
                        repr(float(traj.grid_times[i])),
                    ]
                )
