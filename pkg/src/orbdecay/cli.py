"""Command-line pipeline: prune, prepare, train, tune, predict, eval, synth.

Every command reads explicit file paths, draws all randomness from one
``--seed`` flag (overridable by the ``SEED`` environment variable and by
nothing else), and writes a run manifest describing its inputs so the run
can be replayed. Exit codes: 0 success, 2 input error, 3 numerical failure,
4 configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

from orbdecay import __version__, features, nn, synthetic, tle_data, trajectory
from orbdecay.errors import ConfigError, InputError, NumericalError, OrbdecayError
from orbdecay.evaluation import (
    CASES,
    run_case,
    write_plot_data_csv,
    write_report_csv,
    write_report_json,
)
from orbdecay.features import FeatureTensor, SpaceWeatherSeries
from orbdecay.hypersearch import AshaConfig, SearchSpace, run_search, write_summary
from orbdecay.training import TrainConfig, predict_object, train
from orbdecay.training import build_model


def parse_config_file(path: str) -> dict[str, str]:
    """Flat ``key = value`` configuration with ``include`` directives.

    Included files are resolved relative to the including file and parsed
    first, so the including file's own keys win.
    """
    resolved: dict[str, str] = {}
    base = Path(path).parent
    own: dict[str, str] = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("include "):
            target = line[len("include ") :].strip()
            resolved.update(parse_config_file(str(base / target)))
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        own[key.strip()] = value.strip()
    resolved.update(own)
    return resolved


def _file_digest(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass
class RunManifest:
    """Replay record of one command invocation."""

    command: str
    config_hash: str
    input_digests: dict[str, str]
    seed: int
    tool_version: str
    started_at: str
    finished_at: str

    def write(self, path: str) -> None:
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as handle:
            json.dump(self.__dict__, handle, sort_keys=True, indent=2)
            handle.write("\n")
        os.replace(tmp, path)


class _ManifestWriter:
    def __init__(self, command: str, args: argparse.Namespace, inputs: list[str]):
        self.command = command
        self.seed = args.seed
        config = getattr(args, "config", None)
        self.config_hash = _file_digest(config) if config else ""
        self.inputs = {p: _file_digest(p) for p in inputs if p and os.path.exists(p)}
        self.started = _utc_now()

    def finish(self, path: str) -> None:
        RunManifest(
            command=self.command,
            config_hash=self.config_hash,
            input_digests=self.inputs,
            seed=self.seed,
            tool_version=__version__,
            started_at=self.started,
            finished_at=_utc_now(),
        ).write(path)


def _utc_now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def _config_value(cfg: dict[str, str], key: str, cast, default):
    if key in cfg:
        try:
            return cast(cfg[key])
        except ValueError:
            raise ConfigError(f"config key {key}: cannot parse {cfg[key]!r}") from None
    return default


def _load_config(args: argparse.Namespace) -> dict[str, str]:
    path = getattr(args, "config", None)
    return parse_config_file(path) if path else {}


def cmd_prune(args: argparse.Namespace) -> int:
    manifest = _ManifestWriter("prune", args, [args.omm, args.tip])
    cfg_map = _load_config(args)
    prune_cfg = tle_data.PruneConfig(
        correction_threshold=_config_value(cfg_map, "correction_threshold", float, 0.5),
        gap_threshold=_config_value(cfg_map, "gap_threshold", float, 7.0),
        mm_window=_config_value(cfg_map, "mm_window", int, 7),
        mm_rel_tol=_config_value(cfg_map, "mm_rel_tol", float, 1e-3),
        mm_abs_tol=_config_value(cfg_map, "mm_abs_tol", float, 1e-4),
        stat_window=_config_value(cfg_map, "stat_window", int, 7),
        mad_threshold=_config_value(cfg_map, "mad_threshold", float, 5.0),
    )
    raw = tle_data.load_omm_records(args.omm)
    tip = tle_data.load_tip_csv(args.tip) if args.tip else None
    tracks, skipped = tle_data.build_tracks(raw, tip)
    for norad in skipped:
        print(f"warning: object {norad} has no TIP entry, skipped", file=sys.stderr)

    pruned = []
    report = {"objects": {}, "skipped_no_tip": skipped}
    for track in tracks:
        cleaned, counts = tle_data.prune_track(track, prune_cfg)
        pruned.append(cleaned)
        report["objects"][str(track.norad_id)] = {
            "removed": counts,
            "kept": len(cleaned.records),
        }
    tle_data.save_tracks_json(pruned, args.out)
    if args.report:
        with open(args.report, "w", encoding="utf-8") as handle:
            json.dump(report, handle, sort_keys=True, indent=2)
            handle.write("\n")
    manifest.finish(args.out + ".manifest.json")
    print(f"pruned {len(pruned)} objects -> {args.out}")
    return 0


def cmd_prepare(args: argparse.Namespace) -> int:
    inputs = [args.tracks, args.space_weather, args.metadata]
    manifest = _ManifestWriter("prepare", args, inputs)
    tracks = tle_data.load_tracks_json(args.tracks)
    sw = SpaceWeatherSeries.from_csv(args.space_weather)
    a2m = _load_metadata(args.metadata) if args.metadata else {}

    accepted, rejected = tle_data.select_objects(tracks, tle_data.SelectionCriteria())
    for track, reason in rejected:
        print(f"warning: object {track.norad_id} rejected ({reason})", file=sys.stderr)
    train_tracks, val_tracks, summary = tle_data.split_dataset(accepted, args.split_seed)
    train_ids = {t.norad_id for t in train_tracks}

    trajectories = []
    by_id = {}
    for track in accepted:
        t_ref = (
            track.reentry_epoch
            if args.fit_tref == "tip"
            else track.records[-1].epoch
        )
        samples = [(r.epoch, trajectory.mean_altitude(r)) for r in track.records]
        try:
            coeffs = trajectory.fit_decay_curve(samples, t_ref)
            traj = trajectory.sample_grid(coeffs, norad_id=track.norad_id)
        except OrbdecayError as exc:
            print(f"warning: object {track.norad_id} fit failed: {exc}", file=sys.stderr)
            continue
        trajectories.append(traj)
        by_id[track.norad_id] = track

    tensor = features.assemble_tensor(trajectories, by_id, sw, a2m, train_ids)
    tensor.save(args.out)
    if args.trajectories:
        features.export_trajectories_csv(trajectories, args.trajectories)
    if args.report:
        payload = {
            "accepted": sorted(t.norad_id for t in accepted),
            "rejected": {str(t.norad_id): reason for t, reason in rejected},
            "split": {k: v.__dict__ for k, v in summary.items()},
            "tensor_shape": list(tensor.data.shape),
        }
        with open(args.report, "w", encoding="utf-8") as handle:
            json.dump(payload, handle, sort_keys=True, indent=2)
            handle.write("\n")
    manifest.finish(args.out + ".manifest.json")
    print(f"tensor {tensor.data.shape} -> {args.out}")
    return 0


def _load_metadata(path: str) -> dict[int, float]:
    import csv

    out: dict[int, float] = {}
    with open(path, "r", encoding="utf-8") as handle:
        for row in csv.DictReader(handle):
            try:
                out[int(float(row["NORAD_CAT_ID"]))] = float(row["AREA_TO_MASS"])
            except (KeyError, ValueError) as exc:
                raise InputError(f"{path}: bad metadata row {row}: {exc}") from None
    return out


def _train_config(args: argparse.Namespace, cfg_map: dict[str, str], out_dir: Path) -> TrainConfig:
    return TrainConfig(
        learning_rate=_config_value(cfg_map, "learning_rate", float, 0.001795),
        batch_size=_config_value(cfg_map, "batch_size", int, 27),
        epochs=args.epochs
        if args.epochs is not None
        else _config_value(cfg_map, "epochs", int, 300),
        decay_k=_config_value(cfg_map, "decay_k", float, 0.15665),
        tx=args.tx if args.tx is not None else _config_value(cfg_map, "tx", int, 5),
        seed=args.seed,
        loss_curve_path=str(out_dir / "loss_curve.csv"),
    )


def cmd_train(args: argparse.Namespace) -> int:
    manifest = _ManifestWriter("train", args, [args.tensor])
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg_map = _load_config(args)
    tensor = FeatureTensor.load(args.tensor)
    cfg = _train_config(args, cfg_map, out_dir)
    hidden_size = _config_value(cfg_map, "hidden_size", int, 59)
    num_layers = _config_value(cfg_map, "num_layers", int, 3)
    model = build_model(tensor, cfg, hidden_size, num_layers)
    report = train(model, tensor, cfg)
    if report.best_state is not None:
        nn.load_model_state(model, report.best_state)
    ckpt = out_dir / "best.ckpt.json"
    nn.save_checkpoint(
        model,
        str(ckpt),
        meta={
            "tx": cfg.tx,
            "time_stats": list(tensor.time_stats()),
            "best_epoch": report.best_epoch,
            "best_val_loss": report.best_val_loss,
        },
    )
    manifest.finish(str(out_dir / "manifest.json"))
    print(f"trained {cfg.epochs} epochs, best val {report.best_val_loss:.3e} day^2 -> {ckpt}")
    return 0


def cmd_tune(args: argparse.Namespace) -> int:
    manifest = _ManifestWriter("tune", args, [args.tensor])
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tensor = FeatureTensor.load(args.tensor)
    asha = AshaConfig(
        num_trials=args.trials,
        reduction_factor=args.reduction_factor,
        grace_period=args.grace_period,
        max_epochs=args.max_epochs,
    )
    parallelism = args.parallelism
    if args.jobs is not None:
        parallelism = min(parallelism, args.jobs)
    best, _records = run_search(
        SearchSpace(),
        asha,
        dataset=tensor,
        parallelism=parallelism,
        seed=args.seed,
        tx=args.tx if args.tx is not None else 5,
        ledger_path=str(out_dir / "ledger.jsonl"),
    )
    write_summary(best, str(out_dir / "summary.json"))
    manifest.finish(str(out_dir / "manifest.json"))
    print(f"best trial {best.trial_id}: val {best.rung_losses[-1]:.3e} -> {out_dir}")
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    model, meta, _ = nn.load_checkpoint(args.checkpoint)
    tensor = FeatureTensor.load(args.tensor)
    tx = int(meta.get("tx", args.tx or 5))
    residual = predict_object(model, tensor, args.norad, tx)
    idx = tensor.index_of(args.norad)
    reentry_days = tensor.origin_epochs[idx] + float(residual[-1])
    residual_hours = float(residual[-1] - tensor.targets[idx, tx - 1]) * 24.0
    print(f"norad {args.norad}")
    print(f"reentry_epoch {tle_data.days_to_iso(reentry_days)}")
    print(f"residual_hours {residual_hours:.4f}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    manifest = _ManifestWriter("eval", args, [args.tensor, args.tracks])
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg_map = _load_config(args)
    tensor = FeatureTensor.load(args.tensor)
    tracks = {t.norad_id: t for t in tle_data.load_tracks_json(args.tracks)}
    case = CASES[args.case]
    model = None
    if args.checkpoint:
        model, _, _ = nn.load_checkpoint(args.checkpoint)
    hyper = {
        "learning_rate": _config_value(cfg_map, "learning_rate", float, 0.001795),
        "batch_size": _config_value(cfg_map, "batch_size", int, 27),
        "decay_k": _config_value(cfg_map, "decay_k", float, 0.15665),
        "hidden_size": _config_value(cfg_map, "hidden_size", int, 59),
        "num_layers": _config_value(cfg_map, "num_layers", int, 3),
    }
    result = run_case(
        case,
        tensor,
        tracks,
        hyper=hyper,
        model=model,
        epochs=args.epochs,
        seed=args.seed,
    )
    write_report_json(result, str(out_dir / f"case_{case.name}.json"))
    write_report_csv(result, str(out_dir / f"case_{case.name}.csv"))
    write_plot_data_csv(result, str(out_dir / f"case_{case.name}_sequences.csv"))
    manifest.finish(str(out_dir / "manifest.json"))
    print(f"case {case.name}: {len(result.rows)} test objects -> {out_dir}")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    manifest = _ManifestWriter("synth", args, [])
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = synthetic.SyntheticSpec(
        n_objects=args.objects,
        outlier_rate=args.outlier_rate,
        mean_motion_noise=args.mm_noise,
        eccentricity_noise=args.ecc_noise,
        bstar_noise=args.bstar_noise,
        seed=args.seed,
    )
    dataset = synthetic.generate_tracks(spec)
    synthetic.write_omm_csv(dataset.tracks, str(out_dir / "omm.csv"))
    synthetic.write_tip_csv(dataset.tracks, str(out_dir / "tip.csv"))
    synthetic.write_ground_truth_csv(dataset, str(out_dir / "ground_truth.csv"))
    synthetic.write_space_weather_csv(dataset.space_weather, str(out_dir / "space_weather.csv"))
    synthetic.write_metadata_csv(dataset.area_to_mass, str(out_dir / "metadata.csv"))
    manifest.finish(str(out_dir / "manifest.json"))
    print(f"generated {len(dataset.tracks)} objects -> {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="orbdecay",
        description="Residual-lifetime and re-entry prediction from mean-element histories.",
    )
    parser.add_argument("--seed", type=int, default=None, help="master random seed")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prune", help="clean raw records and remove outliers")
    p.add_argument("--omm", required=True, help="OMM records (JSON array or CSV)")
    p.add_argument("--tip", required=True, help="re-entry assessments CSV")
    p.add_argument("--out", required=True, help="pruned tracks JSON")
    p.add_argument("--report", help="removal report JSON")
    p.add_argument("--config", help="prune thresholds config file")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("prepare", help="fit trajectories and build the feature tensor")
    p.add_argument("--tracks", required=True, help="pruned tracks JSON")
    p.add_argument("--space-weather", required=True, help="solar flux CSV")
    p.add_argument("--metadata", help="area-to-mass CSV")
    p.add_argument("--out", required=True, help="feature tensor JSON")
    p.add_argument("--trajectories", help="trajectory grid CSV export")
    p.add_argument("--report", help="selection/split report JSON")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--fit-tref", choices=("tip", "last-tle"), default="tip")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model on a prepared tensor")
    p.add_argument("--tensor", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config", help="training config file")
    p.add_argument("--tx", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("tune", help="hyperparameter search with early halting")
    p.add_argument("--tensor", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--parallelism", type=int, default=1)
    p.add_argument("--jobs", type=int, help="cap on concurrent trials")
    p.add_argument("--reduction-factor", type=int, default=4)
    p.add_argument("--grace-period", type=int, default=400)
    p.add_argument("--max-epochs", type=int, default=2100)
    p.add_argument("--tx", type=int)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("predict", help="predict one object's re-entry epoch")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tensor", required=True)
    p.add_argument("--norad", type=int, required=True)
    p.add_argument("--tx", type=int)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="run one evaluation case")
    p.add_argument("--case", choices=tuple(CASES), required=True)
    p.add_argument("--tensor", required=True)
    p.add_argument("--tracks", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--checkpoint", help="reuse a trained model")
    p.add_argument("--epochs", type=int, help="override the case training budget")
    p.add_argument("--config", help="hyperparameter config file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--objects", type=int, default=40)
    p.add_argument("--outlier-rate", type=float, default=0.0)
    p.add_argument("--mm-noise", type=float, default=0.0)
    p.add_argument("--ecc-noise", type=float, default=0.0)
    p.add_argument("--bstar-noise", type=float, default=0.0)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.seed is None:
        args.seed = int(os.environ.get("SEED", "0"))
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 4
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
