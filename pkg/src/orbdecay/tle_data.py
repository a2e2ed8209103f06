"""Mean-element record parsing, outlier pruning, and dataset selection.

Observations arrive as OMM-style field records (JSON or CSV). Each object's
time-ordered track is cleaned by a five-step pipeline: correction removal,
gap-based windowing, robust mean-motion regression, statistical screening of
eccentricity/inclination, and removal of negative drag coefficients. Cleaned
tracks are then filtered against dataset selection criteria and split into
training/validation sets.

All epochs are expressed as fractional days since 2000-01-01T00:00:00 UTC.
"""

from __future__ import annotations

import csv
import json
import math
import statistics
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np

from orbdecay.errors import InputError

REFERENCE_EPOCH = datetime(2000, 1, 1, tzinfo=timezone.utc)

OMM_FIELDS = (
    "NORAD_CAT_ID",
    "EPOCH",
    "MEAN_MOTION",
    "ECCENTRICITY",
    "INCLINATION",
    "RA_OF_ASC_NODE",
    "ARG_OF_PERICENTER",
    "MEAN_ANOMALY",
    "BSTAR",
)


class MissingField(InputError):
    """A required field is absent from a raw record."""

    def __init__(self, name: str):
        super().__init__(f"missing field: {name}")
        self.field_name = name


class MalformedNumber(InputError):
    """A field is present but cannot be parsed."""

    def __init__(self, name: str, value: str):
        super().__init__(f"malformed value for {name}: {value!r}")
        self.field_name = name


class InvalidRecord(InputError):
    """Parsed values violate the record invariants."""


class TooFewObjects(InputError):
    """Not enough objects to split into train/validation sets."""


def epoch_to_days(iso: str) -> float:
    """Convert an ISO-8601 timestamp to fractional days since the reference epoch."""
    text = iso.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return (dt - REFERENCE_EPOCH).total_seconds() / 86400.0


def days_to_iso(days: float, microseconds: bool = False) -> str:
    """Inverse of :func:`epoch_to_days`.

    Rounds to whole seconds for display unless microsecond precision is
    requested (used by file writers so epochs round-trip).
    """
    from datetime import timedelta

    dt = REFERENCE_EPOCH + timedelta(days=days)
    if microseconds:
        return dt.strftime("%Y-%m-%dT%H:%M:%S.%f")
    dt = (dt + timedelta(seconds=0.5)).replace(microsecond=0)
    return dt.strftime("%Y-%m-%dT%H:%M:%S")


@dataclass(frozen=True)
class TleRecord:
    """One parsed mean-element observation.

    Attributes:
        norad_id: Catalog number.
        epoch: Fractional days since 2000-01-01T00:00:00 UTC.
        mean_motion: Revolutions per day, > 0.
        eccentricity: Dimensionless, in [0, 1).
        inclination: Degrees, in [0, 180].
        bstar: Drag-like coefficient, 1/Earth-radii.
        raan: Right ascension of ascending node, degrees.
        arg_perigee: Argument of perigee, degrees.
        mean_anomaly: Mean anomaly, degrees.
    """

    norad_id: int
    epoch: float
    mean_motion: float
    eccentricity: float
    inclination: float
    bstar: float
    raan: float = 0.0
    arg_perigee: float = 0.0
    mean_anomaly: float = 0.0

    def __post_init__(self) -> None:
        if not math.isfinite(self.epoch):
            raise InvalidRecord(f"non-finite epoch for {self.norad_id}")
        if self.mean_motion <= 0:
            raise InvalidRecord(f"mean_motion must be > 0, got {self.mean_motion}")
        if not 0.0 <= self.eccentricity < 1.0:
            raise InvalidRecord(f"eccentricity out of [0,1): {self.eccentricity}")
        if not 0.0 <= self.inclination <= 180.0:
            raise InvalidRecord(f"inclination out of [0,180]: {self.inclination}")

    def orbital_period_days(self) -> float:
        return 1.0 / self.mean_motion


@dataclass
class ObjectTrack:
    """Time-ordered records of one object plus re-entry ground truth.

    ``windows`` holds (start, end) index ranges (end-exclusive) produced by
    gap splitting; they are disjoint, contiguous, and cover all records.
    """

    norad_id: int
    records: tuple[TleRecord, ...]
    windows: tuple[tuple[int, int], ...] = ()
    reentry_epoch: float | None = None
    reentry_uncertainty: float | None = None

    def __post_init__(self) -> None:
        epochs = [r.epoch for r in self.records]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise InvalidRecord(
                f"records of {self.norad_id} not strictly increasing in epoch"
            )

    def window_slices(self) -> tuple[tuple[int, int], ...]:
        """Windows, defaulting to one window over all records when unsplit."""
        if self.windows:
            return self.windows
        if not self.records:
            return ()
        return ((0, len(self.records)),)


def make_track(
    norad_id: int,
    records: Iterable[TleRecord],
    reentry_epoch: float | None = None,
    reentry_uncertainty: float | None = None,
) -> ObjectTrack:
    """Build a track from unsorted records.

    Records are sorted by epoch; among records sharing an epoch the
    later-parsed one wins (same semantics as correction removal with a zero
    threshold).
    """
    ordered = sorted(enumerate(records), key=lambda item: (item[1].epoch, item[0]))
    deduped: list[TleRecord] = []
    for _, rec in ordered:
        if deduped and deduped[-1].epoch == rec.epoch:
            deduped[-1] = rec
        else:
            deduped.append(rec)
    return ObjectTrack(
        norad_id=norad_id,
        records=tuple(deduped),
        reentry_epoch=reentry_epoch,
        reentry_uncertainty=reentry_uncertainty,
    )


@dataclass(frozen=True)
class PruneConfig:
    """Thresholds for the five-step pruning pipeline.

    ``correction_threshold`` is a fraction of the orbital period;
    ``correction_period_source`` selects whether that period comes from the
    later or the earlier record of a close pair. Regression and statistical
    window sizes are record counts.
    """

    correction_threshold: float = 0.5
    gap_threshold: float = 7.0
    mm_window: int = 7
    mm_rel_tol: float = 1e-3
    mm_abs_tol: float = 1e-4
    stat_window: int = 7
    mad_threshold: float = 5.0
    correction_period_source: str = "later"

    def __post_init__(self) -> None:
        positive = {
            "correction_threshold": self.correction_threshold,
            "gap_threshold": self.gap_threshold,
            "mm_rel_tol": self.mm_rel_tol,
            "mm_abs_tol": self.mm_abs_tol,
            "mad_threshold": self.mad_threshold,
        }
        for name, value in positive.items():
            if value <= 0:
                raise InputError(f"{name} must be strictly positive")
        if self.mm_window < 3 or self.stat_window < 3:
            raise InputError("regression/statistical windows must be >= 3 records")
        if self.correction_period_source not in ("later", "earlier"):
            raise InputError("correction_period_source must be 'later' or 'earlier'")


@dataclass(frozen=True)
class SelectionCriteria:
    """Dataset admission bounds; all comparisons are inclusive."""

    max_reentry_uncertainty: float = 20.0
    max_initial_altitude: float = 200.0
    min_final_altitude: float = 180.0
    max_eccentricity: float = 0.1
    min_points: int = 4

    def __post_init__(self) -> None:
        if min(
            self.max_reentry_uncertainty,
            self.max_initial_altitude,
            self.min_final_altitude,
            self.max_eccentricity,
        ) <= 0 or self.min_points <= 0:
            raise InputError("selection criteria must be positive")
        if self.min_final_altitude >= self.max_initial_altitude:
            raise InputError("min_final_altitude must be below max_initial_altitude")


def parse_omm(raw: Mapping[str, str]) -> TleRecord:
    """Parse one OMM-style field record into a :class:`TleRecord`."""

    def get(name: str) -> str:
        value = raw.get(name)
        if value is None or str(value).strip() == "":
            raise MissingField(name)
        return str(value)

    def number(name: str) -> float:
        text = get(name)
        try:
            return float(text)
        except ValueError:
            raise MalformedNumber(name, text) from None

    def integer(name: str) -> int:
        text = get(name)
        try:
            return int(float(text))
        except ValueError:
            raise MalformedNumber(name, text) from None

    epoch_text = get("EPOCH")
    try:
        epoch = epoch_to_days(epoch_text)
    except ValueError:
        raise MalformedNumber("EPOCH", epoch_text) from None

    return TleRecord(
        norad_id=integer("NORAD_CAT_ID"),
        epoch=epoch,
        mean_motion=number("MEAN_MOTION"),
        eccentricity=number("ECCENTRICITY"),
        inclination=number("INCLINATION"),
        bstar=number("BSTAR"),
        raan=number("RA_OF_ASC_NODE"),
        arg_perigee=number("ARG_OF_PERICENTER"),
        mean_anomaly=number("MEAN_ANOMALY"),
    )


def _rebuild_windows(group_sizes: Sequence[int]) -> tuple[tuple[int, int], ...]:
    windows = []
    start = 0
    for size in group_sizes:
        if size > 0:
            windows.append((start, start + size))
        start += size
    return tuple(windows)


def _window_groups(track: ObjectTrack) -> list[list[TleRecord]]:
    return [list(track.records[a:b]) for a, b in track.window_slices()]


def _with_groups(track: ObjectTrack, groups: list[list[TleRecord]]) -> ObjectTrack:
    records = tuple(rec for group in groups for rec in group)
    windows = _rebuild_windows([len(g) for g in groups]) if track.windows else ()
    return replace(track, records=records, windows=windows)


def filter_corrections(track: ObjectTrack, cfg: PruneConfig) -> ObjectTrack:
    """Drop records superseded by a near-immediate correction.

    When two consecutive records are closer in time than
    ``correction_threshold`` times the orbital period, the earlier record is
    treated as incorrect and removed.
    """
    kept: list[TleRecord] = []
    for rec in track.records:
        while kept:
            source = rec if cfg.correction_period_source == "later" else kept[-1]
            threshold = cfg.correction_threshold * source.orbital_period_days()
            if rec.epoch - kept[-1].epoch < threshold:
                kept.pop()
            else:
                break
        kept.append(rec)
    return replace(track, records=tuple(kept), windows=())


def split_windows(track: ObjectTrack, cfg: PruneConfig) -> ObjectTrack:
    """Populate gap-delimited windows: a new window starts after any epoch gap
    larger than ``gap_threshold`` days."""
    if not track.records:
        return replace(track, windows=())
    sizes: list[int] = [1]
    for prev, rec in zip(track.records, track.records[1:]):
        if rec.epoch - prev.epoch > cfg.gap_threshold:
            sizes.append(1)
        else:
            sizes[-1] += 1
    return replace(track, windows=_rebuild_windows(sizes))


def theil_sen(x: Sequence[float], y: Sequence[float]) -> tuple[float, float]:
    """Robust line fit: median of pairwise slopes and median intercept."""
    n = len(x)
    slopes = [
        (y[j] - y[i]) / (x[j] - x[i])
        for i in range(n)
        for j in range(i + 1, n)
        if x[j] != x[i]
    ]
    slope = statistics.median(slopes)
    intercept = statistics.median([y[i] - slope * x[i] for i in range(n)])
    return slope, intercept


def filter_mean_motion(track: ObjectTrack, cfg: PruneConfig) -> ObjectTrack:
    """Remove records whose mean motion breaks a robust sliding-window trend.

    Within each window, a Theil-Sen line over ``mm_window`` consecutive
    records predicts the record immediately following them; the record is an
    outlier when the residual exceeds both the absolute and the relative
    tolerance. Windows shorter than ``mm_window + 1`` pass through untouched.
    """
    groups = _window_groups(track)
    for group in groups:
        if len(group) < cfg.mm_window + 1:
            continue
        i = 0
        while i + cfg.mm_window < len(group):
            window = group[i : i + cfg.mm_window]
            candidate = group[i + cfg.mm_window]
            slope, intercept = theil_sen(
                [r.epoch for r in window], [r.mean_motion for r in window]
            )
            predicted = slope * candidate.epoch + intercept
            residual = abs(predicted - candidate.mean_motion)
            if residual > cfg.mm_abs_tol and residual > cfg.mm_rel_tol * abs(
                candidate.mean_motion
            ):
                del group[i + cfg.mm_window]
            else:
                i += 1
    return _with_groups(track, groups)


def _mad_outliers(values: Sequence[float], window: int, threshold: float) -> set[int]:
    """Indices whose deviation from a sliding-window mean exceeds
    ``threshold`` times the local mean absolute deviation of those
    deviations.

    The evaluated point is left out of its own MAD window: a single spike
    dominates a small window's deviation mass, which would otherwise cap the
    attainable ratio below any useful threshold.
    """
    n = len(values)
    half = window // 2
    diffs: dict[int, float] = {}
    for center in range(half, n - (window - half - 1)):
        segment = values[center - half : center - half + window]
        diff = values[center] - sum(segment) / window
        # Snap rounding dust to zero so constant series stay untouched.
        if abs(diff) <= 1e-12 * max(abs(v) for v in segment):
            diff = 0.0
        diffs[center] = diff
    outliers: set[int] = set()
    positions = sorted(diffs)
    series = [diffs[p] for p in positions]
    for k, center in enumerate(positions):
        lo = max(0, k - half)
        hi = min(len(series), k + (window - half))
        local = [d for j, d in enumerate(series[lo:hi], start=lo) if j != k]
        if not local:
            continue
        mean = sum(local) / len(local)
        mad = sum(abs(d - mean) for d in local) / len(local)
        if abs(diffs[center]) > threshold * mad:
            outliers.add(center)
    return outliers


def filter_ecc_incl(track: ObjectTrack, cfg: PruneConfig) -> ObjectTrack:
    """Statistically screen eccentricity and inclination.

    Per element a sliding-window mean is subtracted from the central record
    to form a difference series; a second sliding window over that series
    yields a mean absolute deviation, and a record is removed when its
    difference exceeds ``mad_threshold`` times the local MAD for either
    element. Windows shorter than ``stat_window`` pass through untouched.
    """
    groups = _window_groups(track)
    cleaned: list[list[TleRecord]] = []
    for group in groups:
        if len(group) < cfg.stat_window:
            cleaned.append(group)
            continue
        bad = _mad_outliers(
            [r.eccentricity for r in group], cfg.stat_window, cfg.mad_threshold
        )
        bad |= _mad_outliers(
            [r.inclination for r in group], cfg.stat_window, cfg.mad_threshold
        )
        cleaned.append([r for i, r in enumerate(group) if i not in bad])
    return _with_groups(track, cleaned)


def filter_negative_bstar(track: ObjectTrack) -> ObjectTrack:
    """Remove records with a strictly negative drag coefficient."""
    groups = _window_groups(track)
    cleaned = [[r for r in group if r.bstar >= 0] for group in groups]
    return _with_groups(track, cleaned)


def prune_track(track: ObjectTrack, cfg: PruneConfig) -> tuple[ObjectTrack, dict[str, int]]:
    """Run the full five-step pipeline, reporting per-step removal counts."""
    counts: dict[str, int] = {}
    steps: list[tuple[str, Callable[[ObjectTrack], ObjectTrack]]] = [
        ("corrections", lambda t: filter_corrections(t, cfg)),
        ("windows", lambda t: split_windows(t, cfg)),
        ("mean_motion", lambda t: filter_mean_motion(t, cfg)),
        ("ecc_incl", lambda t: filter_ecc_incl(t, cfg)),
        ("negative_bstar", filter_negative_bstar),
    ]
    for name, step in steps:
        before = len(track.records)
        track = step(track)
        counts[name] = before - len(track.records)
    return track, counts


REJECTION_ORDER = (
    "reentry_uncertainty",
    "initial_altitude",
    "final_altitude",
    "eccentricity",
    "min_points",
)


def select_objects(
    tracks: Sequence[ObjectTrack],
    crit: SelectionCriteria,
    altitude_of: Callable[[TleRecord], float] | None = None,
) -> tuple[list[ObjectTrack], list[tuple[ObjectTrack, str]]]:
    """Partition tracks into accepted objects and rejections with the first
    failed criterion."""
    if altitude_of is None:
        from orbdecay.trajectory import mean_altitude

        altitude_of = mean_altitude

    accepted: list[ObjectTrack] = []
    rejected: list[tuple[ObjectTrack, str]] = []
    for track in tracks:
        reason = None
        if not track.records:
            reason = "min_points"
        elif (
            track.reentry_uncertainty is None
            or track.reentry_uncertainty > crit.max_reentry_uncertainty
        ):
            reason = "reentry_uncertainty"
        elif altitude_of(track.records[0]) > crit.max_initial_altitude:
            reason = "initial_altitude"
        elif altitude_of(track.records[-1]) < crit.min_final_altitude:
            reason = "final_altitude"
        elif any(r.eccentricity > crit.max_eccentricity for r in track.records):
            reason = "eccentricity"
        elif len(track.records) < crit.min_points:
            reason = "min_points"
        if reason is None:
            accepted.append(track)
        else:
            rejected.append((track, reason))
    return accepted, rejected


@dataclass(frozen=True)
class SplitSummary:
    """Per-split record-level statistics of B* and eccentricity."""

    count: int
    bstar_mean: float
    bstar_std: float
    eccentricity_mean: float
    eccentricity_std: float

    @staticmethod
    def of(tracks: Sequence[ObjectTrack]) -> "SplitSummary":
        bstars = np.array([r.bstar for t in tracks for r in t.records], dtype=float)
        eccs = np.array(
            [r.eccentricity for t in tracks for r in t.records], dtype=float
        )
        return SplitSummary(
            count=len(tracks),
            bstar_mean=float(bstars.mean()) if bstars.size else float("nan"),
            bstar_std=float(bstars.std()) if bstars.size else float("nan"),
            eccentricity_mean=float(eccs.mean()) if eccs.size else float("nan"),
            eccentricity_std=float(eccs.std()) if eccs.size else float("nan"),
        )


def split_dataset(
    objects: Sequence[ObjectTrack], seed: int
) -> tuple[list[ObjectTrack], list[ObjectTrack], dict[str, SplitSummary]]:
    """Deterministic 80/20 shuffle split with summary statistics per split.

    The training split takes ``ceil(0.8 * N)`` objects; the remainder goes to
    validation.
    """
    if len(objects) < 5:
        raise TooFewObjects(f"need at least 5 objects, got {len(objects)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(objects))
    n_train = math.ceil(0.8 * len(objects))
    train = [objects[i] for i in order[:n_train]]
    validation = [objects[i] for i in order[n_train:]]
    summary = {
        "train": SplitSummary.of(train),
        "validation": SplitSummary.of(validation),
    }
    return train, validation, summary


class TleProvider(Protocol):
    """Source of raw OMM-style records, keyed by catalog number.

    Lets a network-backed client slot in without touching the filters; the
    bundled implementation reads from files.
    """

    def fetch(self, norad_id: int) -> list[Mapping[str, str]]: ...


class FileProvider:
    """Provider over an already-loaded OMM file."""

    def __init__(self, raw_records: Iterable[Mapping[str, str]]):
        self._by_id: dict[int, list[Mapping[str, str]]] = {}
        for raw in raw_records:
            try:
                norad = int(float(str(raw.get("NORAD_CAT_ID", ""))))
            except ValueError:
                raise MalformedNumber("NORAD_CAT_ID", str(raw.get("NORAD_CAT_ID")))
            self._by_id.setdefault(norad, []).append(raw)

    def fetch(self, norad_id: int) -> list[Mapping[str, str]]:
        return list(self._by_id.get(norad_id, []))

    def norad_ids(self) -> list[int]:
        return sorted(self._by_id)


def load_omm_records(path: str) -> list[Mapping[str, str]]:
    """Read raw OMM records from a JSON array or a CSV file."""
    with open(path, "r", encoding="utf-8") as handle:
        head = handle.read(1)
        handle.seek(0)
        if head == "[":
            data = json.load(handle)
            if not isinstance(data, list):
                raise InputError(f"{path}: expected a JSON array of records")
            return data
        return list(csv.DictReader(handle))


def load_tip_csv(path: str) -> dict[int, tuple[float, float]]:
    """Read re-entry assessments: NORAD id -> (decay epoch days, window minutes)."""
    out: dict[int, tuple[float, float]] = {}
    with open(path, "r", encoding="utf-8") as handle:
        for row in csv.DictReader(handle):
            try:
                norad = int(float(row["NORAD_CAT_ID"]))
                epoch = epoch_to_days(row["DECAY_EPOCH"])
                window = float(row["WINDOW_MINUTES"])
            except (KeyError, ValueError) as exc:
                raise InputError(f"{path}: bad TIP row {row}: {exc}") from None
            out[norad] = (epoch, window)
    return out


def save_tracks_json(tracks: Sequence[ObjectTrack], path: str) -> None:
    """Persist tracks (records, windows, re-entry info) as versioned JSON."""
    payload = {
        "schema": "orbdecay-tracks/1",
        "tracks": [
            {
                "norad_id": t.norad_id,
                "reentry_epoch": t.reentry_epoch,
                "reentry_uncertainty": t.reentry_uncertainty,
                "windows": [list(w) for w in t.windows],
                "records": [
                    {
                        "epoch": r.epoch,
                        "mean_motion": r.mean_motion,
                        "eccentricity": r.eccentricity,
                        "inclination": r.inclination,
                        "bstar": r.bstar,
                        "raan": r.raan,
                        "arg_perigee": r.arg_perigee,
                        "mean_anomaly": r.mean_anomaly,
                    }
                    for r in t.records
                ],
            }
            for t in tracks
        ],
    }
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, sort_keys=True)
        handle.write("\n")


def load_tracks_json(path: str) -> list[ObjectTrack]:
    with open(path, "r", encoding="utf-8") as handle:
        payload = json.load(handle)
    if payload.get("schema") != "orbdecay-tracks/1":
        raise InputError(f"{path}: not a tracks file")
    tracks = []
    for entry in payload["tracks"]:
        records = tuple(
            TleRecord(norad_id=entry["norad_id"], **fields) for fields in entry["records"]
        )
        tracks.append(
            ObjectTrack(
                norad_id=entry["norad_id"],
                records=records,
                windows=tuple(tuple(w) for w in entry["windows"]),
                reentry_epoch=entry["reentry_epoch"],
                reentry_uncertainty=entry["reentry_uncertainty"],
            )
        )
    return tracks


def build_tracks(
    raw_records: Iterable[Mapping[str, str]],
    tip: Mapping[int, tuple[float, float]] | None = None,
) -> tuple[list[ObjectTrack], list[int]]:
    """Group raw records into per-object tracks, attaching re-entry info.

    Returns the tracks plus the ids of objects skipped for lack of a TIP
    entry (only when a TIP table was supplied).
    """
    by_id: dict[int, list[TleRecord]] = {}
    for raw in raw_records:
        rec = parse_omm(raw)
        by_id.setdefault(rec.norad_id, []).append(rec)

    tracks: list[ObjectTrack] = []
    skipped: list[int] = []
    for norad in sorted(by_id):
        if tip is not None:
            entry = tip.get(norad)
            if entry is None:
                skipped.append(norad)
                continue
            epoch, window = entry
            tracks.append(
                make_track(norad, by_id[norad], reentry_epoch=epoch, reentry_uncertainty=window)
            )
        else:
            tracks.append(make_track(norad, by_id[norad]))
    return tracks, skipped
