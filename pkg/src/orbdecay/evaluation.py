"""Case evaluation: train per starting altitude, score test objects.

Four named cases start the prediction at 180/160/140/120 km (input lengths
5/9/13/17 on the 25-point grid). Test objects are scored by the absolute
error on the re-entry epoch, the error relative to the remaining lifetime,
and the MSE over the predicted sequence, and are categorized by whether
their median drag coefficient falls inside the training set's interquartile
range.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from orbdecay import nn
from orbdecay.errors import InputError
from orbdecay.features import FeatureTensor
from orbdecay.tle_data import ObjectTrack
from orbdecay.trajectory import GRID_POINTS, GRID_TOP_KM, grid_altitudes
from orbdecay.training import TrainConfig, TrainReport, predict, train, build_model


class DegenerateInterval(InputError):
    """Relative error is undefined when the lifetime interval is empty."""


class EmptyDistribution(InputError):
    """Quantiles require at least one drag-coefficient value."""


@dataclass(frozen=True)
class CaseSpec:
    """One evaluation case: input length, starting altitude, training budget."""

    name: str
    tx: int
    starting_altitude: float
    training_epochs: int

    def __post_init__(self) -> None:
        altitudes = grid_altitudes()
        expected = float(altitudes[self.tx - 1])
        if expected != self.starting_altitude:
            raise InputError(
                f"case {self.name}: tx={self.tx} starts at {expected} km on the "
                f"grid, not {self.starting_altitude} km"
            )


CASES: dict[str, CaseSpec] = {
    "A": CaseSpec("A", tx=5, starting_altitude=180.0, training_epochs=2900),
    "B": CaseSpec("B", tx=9, starting_altitude=160.0, training_epochs=3000),
    "C": CaseSpec("C", tx=13, starting_altitude=140.0, training_epochs=1200),
    "D": CaseSpec("D", tx=17, starting_altitude=120.0, training_epochs=1200),
}


@dataclass(frozen=True)
class MetricSet:
    """Errors of one prediction: hours, percent of remaining lifetime, day^2."""

    eps_abs: float
    eps_rel: float
    mse: float


def metrics(
    t_pred: float,
    t_actual: float,
    t_initial: float,
    predicted: np.ndarray,
    actual: np.ndarray,
) -> MetricSet:
    """Score one prediction.

    ``eps_abs = |t_pred - t_actual|`` converted to hours;
    ``eps_rel`` divides the same difference (in days) by the remaining
    lifetime ``t_actual - t_initial`` and reports percent; the MSE runs over
    the full output sequences in day^2.
    """
    if t_actual <= t_initial:
        raise DegenerateInterval(
            f"t_actual ({t_actual}) must exceed t_initial ({t_initial})"
        )
    diff_days = abs(t_pred - t_actual)
    return MetricSet(
        eps_abs=diff_days * 24.0,
        eps_rel=diff_days / (t_actual - t_initial) * 100.0,
        mse=nn.mse_loss(actual, predicted),
    )


@dataclass(frozen=True)
class CategoryAssignment:
    """Category 1: median B* inside the training interquartile range."""

    norad_id: int
    category: int
    median_bstar: float
    training_q1: float
    training_q3: float


def _median_bstar(track: ObjectTrack) -> float:
    values = [r.bstar for r in track.records if r.bstar >= 0]
    if not values:
        raise EmptyDistribution(f"object {track.norad_id} has no non-negative B*")
    return float(np.median(values))


def categorize(
    test_tracks: Sequence[ObjectTrack], training_tracks: Sequence[ObjectTrack]
) -> list[CategoryAssignment]:
    """Assign each test object to a category against the training B* spread.

    Quartiles interpolate linearly between order statistics; medians exactly
    on a quartile count as inside.
    """
    if not training_tracks:
        raise EmptyDistribution("no training tracks to build a B* distribution")
    training_medians = np.array([_median_bstar(t) for t in training_tracks])
    q1, q3 = np.quantile(training_medians, [0.25, 0.75], method="linear")
    out = []
    for track in test_tracks:
        median = _median_bstar(track)
        category = 1 if q1 <= median <= q3 else 2
        out.append(
            CategoryAssignment(
                norad_id=track.norad_id,
                category=category,
                median_bstar=median,
                training_q1=float(q1),
                training_q3=float(q3),
            )
        )
    return out


@dataclass
class CaseResult:
    """Per-object scores for one case run."""

    case: str
    rows: list[dict] = field(default_factory=list)
    report: TrainReport | None = None


def run_case(
    case: CaseSpec,
    tensor: FeatureTensor,
    tracks: Mapping[int, ObjectTrack],
    hyper: Mapping[str, float] | None = None,
    model: nn.Seq2SeqModel | None = None,
    epochs: int | None = None,
    seed: int = 0,
) -> CaseResult:
    """Train (or reuse) a model for one case and score every test object.

    Test objects are those outside the tensor's training mask. Each row
    carries the prediction errors, the B* category, and the object's median
    eccentricity so unusual orbits can be flagged when reading results (they
    are never excluded).
    """
    hyper = dict(hyper or {})
    cfg = TrainConfig(
        learning_rate=float(hyper.get("learning_rate", 0.001795)),
        batch_size=int(hyper.get("batch_size", 27)),
        epochs=case.training_epochs if epochs is None else epochs,
        decay_k=float(hyper.get("decay_k", 0.15665)),
        tx=case.tx,
        seed=seed,
    )
    result = CaseResult(case=case.name)
    if model is None:
        model = build_model(
            tensor, cfg, int(hyper.get("hidden_size", 59)), int(hyper.get("num_layers", 3))
        )
        result.report = train(model, tensor, cfg)
        if result.report.best_state is not None:
            nn.load_model_state(model, result.report.best_state)

    train_ids = set(int(i) for i in tensor.norad_ids[tensor.train_mask])
    test_ids = [int(i) for i in tensor.norad_ids[~tensor.train_mask]]
    assignments = {}
    train_tracks = [tracks[i] for i in train_ids if i in tracks]
    test_tracks = [tracks[i] for i in test_ids if i in tracks]
    if train_tracks and test_tracks:
        assignments = {a.norad_id: a for a in categorize(test_tracks, train_tracks)}

    stats = tensor.time_stats()
    for norad in test_ids:
        idx = tensor.index_of(norad)
        segment = tensor.data[idx : idx + 1, : case.tx, :]
        y0 = tensor.data[idx : idx + 1, case.tx - 1, 0]
        predicted = predict(model, segment, y0, stats)[0]
        actual = tensor.targets[idx, case.tx :]
        t_initial = float(tensor.targets[idx, case.tx - 1])
        scored = metrics(
            t_pred=float(predicted[-1]),
            t_actual=float(actual[-1]),
            t_initial=t_initial,
            predicted=predicted,
            actual=actual,
        )
        track = tracks.get(norad)
        median_ecc = (
            float(np.median([r.eccentricity for r in track.records]))
            if track is not None and track.records
            else float("nan")
        )
        assignment = assignments.get(norad)
        result.rows.append(
            {
                "case": case.name,
                "norad_id": norad,
                "category": assignment.category if assignment else None,
                "median_bstar": assignment.median_bstar if assignment else None,
                "median_eccentricity": median_ecc,
                "eps_abs_hours": scored.eps_abs,
                "eps_rel_percent": scored.eps_rel,
                "mse_day2": scored.mse,
                "t_pred_days": float(predicted[-1]),
                "t_actual_days": float(actual[-1]),
                "t_initial_days": t_initial,
                "nonmonotone_steps": int((np.diff(predicted) <= 0).sum()),
                "predicted_sequence": [float(x) for x in predicted],
                "actual_sequence": [float(x) for x in actual],
            }
        )
    return result


def write_report_json(result: CaseResult, path: str) -> None:
    payload = {
        "case": result.case,
        "rows": result.rows,
    }
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, sort_keys=True, indent=2)
        handle.write("\n")


def write_report_csv(result: CaseResult, path: str) -> None:
    columns = [
        "case",
        "norad_id",
        "category",
        "median_bstar",
        "median_eccentricity",
        "eps_abs_hours",
        "eps_rel_percent",
        "mse_day2",
        "t_pred_days",
        "t_actual_days",
        "t_initial_days",
        "nonmonotone_steps",
    ]
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(columns)
        for row in sorted(result.rows, key=lambda r: r["norad_id"]):
            writer.writerow([_cell(row[c]) for c in columns])


def write_plot_data_csv(result: CaseResult, path: str) -> None:
    """True vs predicted residual times per object, for external plotting."""
    altitudes = grid_altitudes()
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["case", "norad_id", "altitude_km", "time_true_days", "time_predicted_days"])
        for row in sorted(result.rows, key=lambda r: r["norad_id"]):
            offset = GRID_POINTS - len(row["actual_sequence"])
            pairs = zip(row["actual_sequence"], row["predicted_sequence"])
            for i, (true_t, pred_t) in enumerate(pairs):
                writer.writerow(
                    [
                        row["case"],
                        row["norad_id"],
                        _cell(float(altitudes[offset + i])),
                        _cell(true_t),
                        _cell(pred_t),
                    ]
                )


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)
