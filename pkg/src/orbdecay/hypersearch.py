"""Random hyperparameter search with asynchronous successive halving.

Configurations are drawn from log-uniform and quantized-uniform ranges;
each trial trains in rung-sized increments (geometric epoch milestones) and
is halted as soon as its validation loss falls outside the promotable
fraction of everything recorded so far at its rung. Decisions never wait
for stragglers, so the schedule is identical whether trials run serially or
in parallel threads.
"""

from __future__ import annotations

import hashlib
import json
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from orbdecay.errors import InputError, NumericalError
from orbdecay.features import FeatureTensor
from orbdecay.training import TrainConfig, Trainer, build_model


class MissingLoss(InputError):
    """A promotion decision was requested for an unrecorded rung."""


class NoCompletedTrials(NumericalError):
    """Every trial failed before reaching the final rung."""


@dataclass(frozen=True)
class SearchSpace:
    """Sampling ranges: log-uniform for rates, integer-uniform for sizes."""

    learning_rate: tuple[float, float] = (1e-6, 1e-1)
    num_layers: tuple[int, int] = (1, 3)
    hidden_size: tuple[int, int] = (16, 256)
    batch_size: tuple[int, int] = (8, 64)
    decay_k: tuple[float, float] = (0.1, 0.99)


@dataclass(frozen=True)
class AshaConfig:
    """Inputs of the halving scheduler."""

    num_trials: int = 100
    reduction_factor: int = 4
    grace_period: int = 400
    max_epochs: int = 2100

    def __post_init__(self) -> None:
        if self.reduction_factor < 2:
            raise InputError("reduction factor must be >= 2")
        if not 0 < self.grace_period <= self.max_epochs:
            raise InputError("grace period must lie in (0, max_epochs]")
        if self.num_trials < 1:
            raise InputError("need at least one trial")


@dataclass
class TrialRecord:
    """One sampled configuration and its per-rung validation losses."""

    trial_id: int
    config: dict
    rung_losses: list[float] = field(default_factory=list)
    status: str = "running"
    epochs_trained: int = 0


def sample_config(space: SearchSpace, rng: np.random.Generator) -> dict:
    """Draw one configuration from the search space."""

    def log_uniform(lo: float, hi: float) -> float:
        return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))

    def quantized(lo: int, hi: int) -> int:
        return int(rng.integers(lo, hi + 1))

    return {
        "learning_rate": log_uniform(*space.learning_rate),
        "num_layers": quantized(*space.num_layers),
        "hidden_size": quantized(*space.hidden_size),
        "batch_size": quantized(*space.batch_size),
        "decay_k": log_uniform(*space.decay_k),
    }


def rung_epochs(cfg: AshaConfig) -> list[int]:
    """Geometric epoch milestones, capped at the training budget."""
    milestones: list[int] = []
    epoch = cfg.grace_period
    while epoch < cfg.max_epochs:
        milestones.append(epoch)
        epoch *= cfg.reduction_factor
    milestones.append(cfg.max_epochs)
    return milestones


def asha_decide(
    records: list[TrialRecord], trial_id: int, rung: int, eta: int = 4
) -> str:
    """Asynchronous halving rule for one trial at one rung.

    The trial is promoted iff its loss ranks within the top ``ceil(n / eta)``
    of the ``n`` losses recorded so far at this rung (lower is better);
    ties break toward the earlier trial id.
    """
    entries = [
        (record.rung_losses[rung], record.trial_id)
        for record in records
        if len(record.rung_losses) > rung
    ]
    mine = [e for e in entries if e[1] == trial_id]
    if not mine:
        raise MissingLoss(f"trial {trial_id} has no loss at rung {rung}")
    entries.sort()
    keep = math.ceil(len(entries) / eta)
    promoted = {trial for _, trial in entries[:keep]}
    return "promote" if trial_id in promoted else "halt"


class TrialObjective(Protocol):
    """Incremental objective: advance training and report validation loss."""

    def run_to(self, epoch: int) -> float: ...


ObjectiveFactory = Callable[[dict, int], TrialObjective]


def training_objective_factory(
    tensor: FeatureTensor, tx: int, decoder_feeds_constants: bool = False
) -> ObjectiveFactory:
    """Real objective: train the sequence model on a prepared tensor."""

    def build(config: dict, seed: int) -> TrialObjective:
        cfg = TrainConfig(
            learning_rate=config["learning_rate"],
            batch_size=config["batch_size"],
            epochs=0,
            decay_k=config["decay_k"],
            tx=tx,
            seed=seed,
            decoder_feeds_constants=decoder_feeds_constants,
        )
        model = build_model(tensor, cfg, config["hidden_size"], config["num_layers"])
        return Trainer(model, tensor, cfg)

    return build


def trial_seed(master_seed: int, trial_id: int) -> int:
    """Stable per-trial seed derived by hashing, independent of process state."""
    digest = hashlib.sha256(f"{master_seed}:{trial_id}".encode()).digest()
    return int.from_bytes(digest[:8], "big") % (2**63)


class _Scheduler:
    """Shared ASHA state: records, rung decisions, and the ledger sink."""

    def __init__(self, asha: AshaConfig, ledger_path: str | None):
        self.asha = asha
        self.records: list[TrialRecord] = []
        self.lock = threading.Lock()
        self.milestones = rung_epochs(asha)
        self.ledger_path = ledger_path
        self._ledger_lines: list[str] = []

    def register(self, record: TrialRecord) -> None:
        with self.lock:
            self.records.append(record)

    def report(self, record: TrialRecord, rung: int, epoch: int, loss: float) -> str:
        """Record a rung loss and return the decision for this trial."""
        with self.lock:
            record.rung_losses.append(loss)
            record.epochs_trained = epoch
            final = rung == len(self.milestones) - 1
            if math.isinf(loss):
                decision = "halt"
            elif final:
                decision = "complete"
            else:
                decision = asha_decide(
                    self.records, record.trial_id, rung, eta=self.asha.reduction_factor
                )
            record.status = {
                "promote": "running",
                "halt": "halted",
                "complete": "completed",
            }[decision]
            self._ledger_lines.append(
                json.dumps(
                    {
                        "trial": record.trial_id,
                        "config": record.config,
                        "rung": rung,
                        "epoch": epoch,
                        "val_loss": loss if math.isfinite(loss) else None,
                        "decision": decision,
                    },
                    sort_keys=True,
                )
            )
            return decision

    def flush(self) -> None:
        if self.ledger_path is None:
            return
        with open(self.ledger_path, "w", encoding="utf-8") as handle:
            for line in self._ledger_lines:
                handle.write(line + "\n")


def run_search(
    space: SearchSpace,
    asha: AshaConfig,
    dataset: FeatureTensor | None = None,
    parallelism: int = 1,
    seed: int = 0,
    tx: int = 5,
    objective_factory: ObjectiveFactory | None = None,
    ledger_path: str | None = None,
) -> tuple[TrialRecord, list[TrialRecord]]:
    """Sample, train, and halve; returns the best trial and the full ledger.

    Configurations are all drawn up front from the master seed, so the
    sampled sequence is independent of scheduling. With ``parallelism=1``
    the ledger is bit-reproducible for a deterministic objective.
    """
    if objective_factory is None:
        if dataset is None:
            raise InputError("run_search needs a dataset or an objective factory")
        objective_factory = training_objective_factory(dataset, tx)

    rng = np.random.default_rng(seed)
    configs = [sample_config(space, rng) for _ in range(asha.num_trials)]
    scheduler = _Scheduler(asha, ledger_path)

    def run_trial(trial_id: int) -> None:
        record = TrialRecord(trial_id=trial_id, config=configs[trial_id])
        scheduler.register(record)
        try:
            objective = objective_factory(configs[trial_id], trial_seed(seed, trial_id))
        except Exception:
            scheduler.report(record, 0, 0, math.inf)
            return
        for rung, epoch in enumerate(scheduler.milestones):
            try:
                loss = objective.run_to(epoch)
                if not math.isfinite(loss):
                    loss = math.inf
            except Exception:
                loss = math.inf
            decision = scheduler.report(record, rung, epoch, loss)
            if decision != "promote":
                break

    if parallelism <= 1:
        for trial_id in range(asha.num_trials):
            run_trial(trial_id)
    else:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            list(pool.map(run_trial, range(asha.num_trials)))

    scheduler.flush()
    completed = [r for r in scheduler.records if r.status == "completed"]
    if not completed:
        raise NoCompletedTrials("no trial reached the final rung")
    best = min(completed, key=lambda r: (r.rung_losses[-1], r.trial_id))
    return best, scheduler.records


def write_summary(best: TrialRecord, path: str) -> None:
    """Final summary mirroring the optimized-hyperparameter table."""
    payload = {
        "learning_rate": best.config["learning_rate"],
        "num_layers": best.config["num_layers"],
        "hidden_size": best.config["hidden_size"],
        "batch_size": best.config["batch_size"],
        "decay_k": best.config["decay_k"],
        "trial": best.trial_id,
        "val_loss": best.rung_losses[-1],
        "epochs_trained": best.epochs_trained,
    }
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, sort_keys=True, indent=2)
        handle.write("\n")
