import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orbdecay import tle_data
from orbdecay.tle_data import (
    FileProvider,
    MalformedNumber,
    MissingField,
    ObjectTrack,
    PruneConfig,
    SelectionCriteria,
    TleRecord,
    TooFewObjects,
    build_tracks,
    epoch_to_days,
    filter_corrections,
    filter_ecc_incl,
    filter_mean_motion,
    filter_negative_bstar,
    load_tracks_json,
    make_track,
    parse_omm,
    prune_track,
    save_tracks_json,
    select_objects,
    split_dataset,
    split_windows,
    theil_sen,
)


def record(
    epoch: float,
    mean_motion: float = 16.0,
    eccentricity: float = 0.001,
    inclination: float = 51.6,
    bstar: float = 1e-4,
    norad_id: int = 1,
) -> TleRecord:
    return TleRecord(
        norad_id=norad_id,
        epoch=epoch,
        mean_motion=mean_motion,
        eccentricity=eccentricity,
        inclination=inclination,
        bstar=bstar,
    )


def track(records, **kwargs) -> ObjectTrack:
    return make_track(records[0].norad_id if records else 1, records, **kwargs)


def raw_record(**overrides) -> dict:
    base = {
        "NORAD_CAT_ID": "12345",
        "EPOCH": "2018-04-01T00:00:00",
        "MEAN_MOTION": "16.0",
        "ECCENTRICITY": "0.001",
        "INCLINATION": "51.6",
        "RA_OF_ASC_NODE": "120.0",
        "ARG_OF_PERICENTER": "30.0",
        "MEAN_ANOMALY": "10.0",
        "BSTAR": "0.0001",
    }
    base.update(overrides)
    return base


def julian_day_number(y: int, m: int, d: int) -> int:
    # Fliegel-Van Flandern integer arithmetic, independent of datetime.
    return (
        (1461 * (y + 4800 + (m - 14) // 12)) // 4
        + (367 * (m - 2 - 12 * ((m - 14) // 12))) // 12
        - (3 * ((y + 4900 + (m - 14) // 12) // 100)) // 4
        + d
        - 32075
    )


class TestParseOmm:
    def test_copies_numeric_fields(self):
        rec = parse_omm(raw_record())
        assert rec.mean_motion == 16.0
        assert rec.eccentricity == 0.001
        assert rec.norad_id == 12345

    def test_missing_bstar_identifies_field(self):
        raw = raw_record()
        del raw["BSTAR"]
        with pytest.raises(MissingField) as err:
            parse_omm(raw)
        assert err.value.field_name == "BSTAR"

    def test_epoch_matches_independent_day_arithmetic(self):
        rec = parse_omm(raw_record(EPOCH="2018-04-01T00:00:00"))
        expected = julian_day_number(2018, 4, 1) - julian_day_number(2000, 1, 1)
        assert rec.epoch == expected == 6665

    def test_fractional_epoch(self):
        assert epoch_to_days("2000-01-01T12:00:00") == 0.5
        assert epoch_to_days("2000-01-02T00:00:00Z") == 1.0

    def test_malformed_number(self):
        with pytest.raises(MalformedNumber):
            parse_omm(raw_record(MEAN_MOTION="sixteen"))


class TestFilterCorrections:
    def test_close_pair_drops_earlier(self):
        # 10 s apart on a 90 min orbit (16 rev/day): far below half a period.
        t = track([record(0.0), record(10.0 / 86400.0)])
        out = filter_corrections(t, PruneConfig())
        assert [r.epoch for r in out.records] == [10.0 / 86400.0]

    def test_distant_pair_kept(self):
        t = track([record(0.0), record(1.0)])
        out = filter_corrections(t, PruneConfig())
        assert len(out.records) == 2

    def test_only_violating_pair_removed(self):
        cfg = PruneConfig()
        epochs = [0.0, 0.5, 0.5004]
        t = track([record(e) for e in epochs])
        out = filter_corrections(t, cfg)
        # Oracle: brute-force pairwise check against half the later period.
        period = 1.0 / 16.0
        assert epochs[1] - epochs[0] >= 0.5 * period
        assert epochs[2] - epochs[1] < 0.5 * period
        assert [r.epoch for r in out.records] == [0.0, 0.5004]


class TestSplitWindows:
    def test_single_window(self):
        t = track([record(float(i)) for i in range(5)])
        out = split_windows(t, PruneConfig())
        assert out.windows == ((0, 5),)

    def test_large_gap_splits(self):
        t = track([record(0.0), record(1.0), record(31.0), record(32.0)])
        out = split_windows(t, PruneConfig(gap_threshold=7.0))
        assert out.windows == ((0, 2), (2, 4))

    def test_alternating_gaps(self):
        # Gaps (1, 10, 1, 10, 1) with threshold 7: enumerate the gaps to
        # locate window starts.
        epochs = [0.0, 1.0, 11.0, 12.0, 22.0, 23.0]
        gaps = [b - a for a, b in zip(epochs, epochs[1:])]
        expected_sizes = [2, 2, 2]
        assert sum(g > 7.0 for g in gaps) == len(expected_sizes) - 1
        out = split_windows(track([record(e) for e in epochs]), PruneConfig())
        assert [b - a for a, b in out.windows] == expected_sizes


def linear_mm_track(n: int = 20, slope: float = 0.01, cadence: float = 0.5):
    return [record(i * cadence, mean_motion=16.0 + slope * i * cadence) for i in range(n)]


class TestFilterMeanMotion:
    def test_spike_removed(self):
        cfg = PruneConfig()
        records = linear_mm_track()
        spiked = records[12]
        tolerance = max(cfg.mm_abs_tol, cfg.mm_rel_tol * spiked.mean_motion)
        records[12] = record(
            spiked.epoch, mean_motion=spiked.mean_motion + 10.0 * tolerance
        )
        out = filter_mean_motion(track(records), cfg)
        kept = [r.epoch for r in out.records]
        assert spiked.epoch not in kept or records[12].epoch not in kept
        assert len(out.records) == 19
        assert all(abs(r.mean_motion - (16.0 + 0.01 * r.epoch)) < 1e-9 for r in out.records)

    def test_exactly_linear_untouched(self):
        out = filter_mean_motion(track(linear_mm_track()), PruneConfig())
        assert len(out.records) == 20

    def test_short_series_passes_through(self):
        records = linear_mm_track(n=7)
        out = filter_mean_motion(track(records), PruneConfig(mm_window=7))
        assert len(out.records) == 7

    def test_theil_sen_recovers_line(self):
        xs = [0.0, 1.0, 2.0, 3.0, 4.0]
        ys = [1.0 + 2.0 * x for x in xs]
        slope, intercept = theil_sen(xs, ys)
        assert slope == pytest.approx(2.0)
        assert intercept == pytest.approx(1.0)


def mad_oracle(values, window, threshold):
    """Brute-force re-computation of the sliding mean/MAD screening
    (leave-one-out MAD, matching the filter contract)."""
    half = window // 2
    n = len(values)
    diffs = {}
    for c in range(half, n - (window - half - 1)):
        seg = values[c - half : c - half + window]
        diff = values[c] - sum(seg) / window
        if abs(diff) <= 1e-12 * max(abs(v) for v in seg):
            diff = 0.0
        diffs[c] = diff
    positions = sorted(diffs)
    series = [diffs[p] for p in positions]
    flagged = set()
    for k, c in enumerate(positions):
        lo = max(0, k - half)
        hi = min(len(series), k + (window - half))
        local = [d for j, d in enumerate(series[lo:hi], start=lo) if j != k]
        if not local:
            continue
        mean = sum(local) / len(local)
        mad = sum(abs(d - mean) for d in local) / len(local)
        if abs(diffs[c]) > threshold * mad:
            flagged.add(c)
    return flagged


class TestFilterEccIncl:
    def test_spike_removed(self):
        cfg = PruneConfig()
        rng = np.random.default_rng(0)
        noise = rng.normal(scale=1e-5, size=30)
        records = [record(float(i), eccentricity=0.001 + noise[i]) for i in range(30)]
        spike_at = 15
        records[spike_at] = record(15.0, eccentricity=0.001 + 50 * 1e-5)
        values = [r.eccentricity for r in records]
        assert spike_at in mad_oracle(values, cfg.stat_window, cfg.mad_threshold)
        out = filter_ecc_incl(track(records), cfg)
        assert 15.0 not in [r.epoch for r in out.records]

    def test_constant_series_untouched(self):
        records = [record(float(i)) for i in range(20)]
        out = filter_ecc_incl(track(records), PruneConfig())
        assert len(out.records) == 20

    def test_marginal_spike_kept(self):
        # A bump below threshold * MAD must survive; the oracle locates the
        # largest such bump for this seeded series.
        cfg = PruneConfig(mad_threshold=5.0)
        rng = np.random.default_rng(1)
        noise = rng.normal(scale=1e-5, size=30)
        base = [0.001 + noise[i] for i in range(30)]
        bump = 4e-5
        values = None
        while bump > 1e-7:
            candidate = list(base)
            candidate[15] = base[15] + bump
            if 15 not in mad_oracle(candidate, cfg.stat_window, cfg.mad_threshold):
                values = candidate
                break
            bump /= 2.0
        assert values is not None, "no sub-threshold bump found"
        records = [record(float(i), eccentricity=v) for i, v in enumerate(values)]
        out = filter_ecc_incl(track(records), cfg)
        assert 15.0 in [r.epoch for r in out.records]


class TestFilterNegativeBstar:
    def test_negative_removed(self):
        t = track(
            [
                record(0.0, bstar=1e-4),
                record(1.0, bstar=-2e-5),
                record(2.0, bstar=3e-4),
            ]
        )
        out = filter_negative_bstar(t)
        assert [r.bstar for r in out.records] == [1e-4, 3e-4]

    def test_all_positive_untouched(self):
        t = track([record(float(i), bstar=1e-4) for i in range(3)])
        assert len(filter_negative_bstar(t).records) == 3

    def test_zero_kept(self):
        t = track([record(0.0, bstar=0.0)])
        assert len(filter_negative_bstar(t).records) == 1


class TestPipelineInvariants:
    def spiked_track(self, seed: int = 0) -> ObjectTrack:
        records = linear_mm_track(n=40)
        records[20] = record(records[20].epoch, mean_motion=records[20].mean_motion + 0.5)
        records[30] = record(
            records[30].epoch, mean_motion=records[30].mean_motion, eccentricity=0.02
        )
        records[5] = record(
            records[5].epoch, mean_motion=records[5].mean_motion, bstar=-1e-5
        )
        return track(records)

    @pytest.mark.parametrize(
        "filter_fn",
        [
            lambda t: filter_corrections(t, PruneConfig()),
            lambda t: split_windows(t, PruneConfig()),
            lambda t: filter_mean_motion(t, PruneConfig()),
            lambda t: filter_ecc_incl(t, PruneConfig()),
            filter_negative_bstar,
        ],
    )
    def test_idempotent(self, filter_fn):
        once = filter_fn(self.spiked_track())
        twice = filter_fn(once)
        assert [r.epoch for r in once.records] == [r.epoch for r in twice.records]
        assert once.windows == twice.windows

    def test_monotone_removal_and_order(self):
        t = self.spiked_track()
        out, counts = prune_track(t, PruneConfig())
        assert len(out.records) <= len(t.records)
        epochs = [r.epoch for r in out.records]
        assert epochs == sorted(epochs)
        assert sum(counts.values()) == len(t.records) - len(out.records)
        assert list(counts) == [
            "corrections",
            "windows",
            "mean_motion",
            "ecc_incl",
            "negative_bstar",
        ]

    def test_pipeline_removes_all_plants(self):
        out, counts = prune_track(self.spiked_track(), PruneConfig())
        assert counts["mean_motion"] == 1
        assert counts["ecc_incl"] == 1
        assert counts["negative_bstar"] == 1

    @given(st.lists(st.floats(min_value=0.0, max_value=1000.0), min_size=2, max_size=40, unique=True))
    @settings(max_examples=50, deadline=None)
    def test_corrections_output_strictly_increasing(self, epochs):
        t = track([record(e) for e in sorted(epochs)])
        out = filter_corrections(t, PruneConfig())
        diffs = np.diff([r.epoch for r in out.records])
        assert (diffs > 0).all()
        assert len(out.records) <= len(t.records)


def altitude_record(altitude_km: float, epoch: float, **kwargs) -> TleRecord:
    from orbdecay.trajectory import mean_motion_from_altitude

    return record(epoch, mean_motion=mean_motion_from_altitude(altitude_km), **kwargs)


class TestSelectObjects:
    def good_track(self, norad=1):
        records = [altitude_record(198.0 - 4 * i, float(i), norad_id=norad) for i in range(5)]
        return make_track(norad, records, reentry_epoch=10.0, reentry_uncertainty=5.0)

    def test_good_track_accepted(self):
        accepted, rejected = select_objects([self.good_track()], SelectionCriteria())
        assert len(accepted) == 1 and not rejected

    def test_high_eccentricity_rejected(self):
        records = [
            altitude_record(198.0 - 4 * i, float(i), eccentricity=0.15) for i in range(5)
        ]
        t = make_track(1, records, reentry_epoch=10.0, reentry_uncertainty=5.0)
        _, rejected = select_objects([t], SelectionCriteria())
        assert rejected[0][1] == "eccentricity"

    def test_too_few_points_rejected(self):
        records = [altitude_record(198.0 - 4 * i, float(i)) for i in range(3)]
        t = make_track(1, records, reentry_epoch=10.0, reentry_uncertainty=5.0)
        _, rejected = select_objects([t], SelectionCriteria())
        assert rejected[0][1] == "min_points"

    def test_exact_limits_accepted(self):
        # Bounds are inclusive; pin the altitudes directly so float round
        # trips through the mean motion cannot shave the limit values.
        crit = SelectionCriteria()
        altitudes = {0.0: crit.max_initial_altitude, 1.0: 195.0, 2.0: 190.0,
                     3.0: crit.min_final_altitude}
        records = [
            record(epoch, eccentricity=crit.max_eccentricity) for epoch in altitudes
        ]
        t = make_track(1, records, reentry_epoch=10.0,
                       reentry_uncertainty=crit.max_reentry_uncertainty)
        accepted, rejected = select_objects(
            [t], crit, altitude_of=lambda r: altitudes[r.epoch]
        )
        assert len(accepted) == 1, rejected

    def test_missing_tip_rejected(self):
        t = make_track(1, [altitude_record(198.0 - i, float(i)) for i in range(5)])
        _, rejected = select_objects([t], SelectionCriteria())
        assert rejected[0][1] == "reentry_uncertainty"

    def test_final_altitude_bound(self):
        records = [altitude_record(198.0, 0.0), altitude_record(190.0, 1.0),
                   altitude_record(185.0, 2.0), altitude_record(150.0, 3.0)]
        t = make_track(1, records, reentry_epoch=10.0, reentry_uncertainty=5.0)
        _, rejected = select_objects([t], SelectionCriteria())
        assert rejected[0][1] == "final_altitude"


class TestSplitDataset:
    def tracks(self, n):
        return [self._one(i) for i in range(n)]

    def _one(self, norad):
        return make_track(norad, [record(0.0, norad_id=norad), record(1.0, norad_id=norad)])

    def test_ten_objects_split_eight_two(self):
        train, val, summary = split_dataset(self.tracks(10), seed=0)
        assert (len(train), len(val)) == (8, 2)
        assert summary["train"].count == 8

    def test_deterministic(self):
        a_train, a_val, _ = split_dataset(self.tracks(20), seed=7)
        b_train, b_val, _ = split_dataset(self.tracks(20), seed=7)
        assert [t.norad_id for t in a_train] == [t.norad_id for t in b_train]
        assert [t.norad_id for t in a_val] == [t.norad_id for t in b_val]

    def test_417_objects(self):
        train, val, _ = split_dataset(self.tracks(417), seed=0)
        assert (len(train), len(val)) == (334, 83)

    def test_too_few(self):
        with pytest.raises(TooFewObjects):
            split_dataset(self.tracks(4), seed=0)


class TestIngestion:
    def test_build_tracks_skips_missing_tip(self):
        raws = [raw_record(NORAD_CAT_ID="1"), raw_record(NORAD_CAT_ID="2")]
        tip = {1: (100.0, 5.0)}
        tracks, skipped = build_tracks(raws, tip)
        assert [t.norad_id for t in tracks] == [1]
        assert skipped == [2]

    def test_duplicate_epoch_keeps_later(self):
        records = [record(1.0, mean_motion=16.0), record(1.0, mean_motion=16.5)]
        t = make_track(1, records)
        assert len(t.records) == 1
        assert t.records[0].mean_motion == 16.5

    def test_file_provider(self):
        provider = FileProvider([raw_record(NORAD_CAT_ID="7"), raw_record(NORAD_CAT_ID="9")])
        assert provider.norad_ids() == [7, 9]
        assert len(provider.fetch(7)) == 1
        assert provider.fetch(8) == []

    def test_tracks_json_round_trip(self, tmp_path):
        t = make_track(
            5,
            [record(0.0, norad_id=5), record(1.0, norad_id=5)],
            reentry_epoch=3.5,
            reentry_uncertainty=2.0,
        )
        t = split_windows(t, PruneConfig())
        path = tmp_path / "tracks.json"
        save_tracks_json([t], str(path))
        loaded = load_tracks_json(str(path))
        assert loaded[0].norad_id == 5
        assert loaded[0].reentry_epoch == 3.5
        assert loaded[0].windows == t.windows
        assert [r.epoch for r in loaded[0].records] == [0.0, 1.0]

    def test_load_omm_records_csv_and_json(self, tmp_path):
        import json as json_module

        csv_path = tmp_path / "omm.csv"
        rows = [raw_record()]
        with open(csv_path, "w", newline="") as handle:
            import csv as csv_module

            writer = csv_module.DictWriter(handle, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
        parsed_csv = tle_data.load_omm_records(str(csv_path))
        assert parsed_csv[0]["MEAN_MOTION"] == "16.0"

        json_path = tmp_path / "omm.json"
        json_path.write_text(json_module.dumps(rows))
        parsed_json = tle_data.load_omm_records(str(json_path))
        assert parsed_json[0]["NORAD_CAT_ID"] == "12345"


class TestRecordInvariants:
    def test_nonpositive_mean_motion_rejected(self):
        with pytest.raises(tle_data.InvalidRecord):
            record(0.0, mean_motion=0.0)

    def test_eccentricity_bounds(self):
        with pytest.raises(tle_data.InvalidRecord):
            record(0.0, eccentricity=1.0)

    def test_unsorted_records_rejected(self):
        with pytest.raises(tle_data.InvalidRecord):
            ObjectTrack(norad_id=1, records=(record(1.0), record(0.0)))
