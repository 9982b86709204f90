"""Two-phase training schedule: teacher-forced pretraining, then finetuning on sampled rollouts."""

from __future__ import annotations

import csv
import logging
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import Adam, backward, recording
from .autodiff import checkpoint as ckpt
from .config import RunConfig
from .data import Instance, batches, collate
from .model import TraversalModel
from .streams import stream

log = logging.getLogger(__name__)

PHASES = ("pretrain", "finetune")
SHUFFLE_STREAM = 3
LOG_FIELDS = ("phase", "epoch", "l_bc", "l_reg", "l")


class NumericalError(RuntimeError):
    """A non-finite loss or gradient; ``batch_ids`` names the offending scenes."""

    def __init__(self, message: str, batch_ids: Sequence[str]):
        super().__init__(message)
        self.batch_ids = list(batch_ids)


@dataclass(frozen=True)
class EpochLog:
    phase: str
    epoch: int
    l_bc: float
    l_reg: float
    l: float

    def row(self) -> dict:
        return {"phase": self.phase, "epoch": self.epoch, "l_bc": repr(self.l_bc), "l_reg": repr(self.l_reg),
                "l": repr(self.l)}


def train_step(model: TraversalModel, opt: Adam, instances: Sequence[Instance], teacher_forcing: bool,
               key: tuple[int, int]) -> tuple[float, float, float]:
    batch = collate(instances)
    with recording() as tape:
        out = model.forward(batch, teacher_forcing, key)
        losses = model.losses(batch, out)
    values = tuple(float(x.data) for x in losses)
    if not np.all(np.isfinite(values)):
        raise NumericalError(f"non-finite loss {values}", [i.scene_id for i in instances])
    model.store.zero_grad()
    backward(tape, losses.total)
    for name, p in model.store:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient in {name}", [i.scene_id for i in instances])
    opt.step()
    return values


class Trainer:
    """Runs the schedule and owns the optimizer state and progress counters."""

    def __init__(self, config: RunConfig, model: TraversalModel | None = None):
        self.config = config
        self.model = model or TraversalModel(config)
        self.opt = Adam(self.model.store, lr=config.train.lr)
        self.phase_index = 0
        self.epoch = 0  # epochs completed within the current phase
        self.history: list[EpochLog] = []

    # checkpoints ---------------------------------------------------------

    def state(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict(self.model.state())
        out.update(self.opt.state())
        out["progress"] = np.array([self.phase_index, self.epoch], dtype=np.float64)
        return out

    def load_state(self, state) -> None:
        self.model.load_state(state)
        if "adam.t" in state:
            self.opt.load_state(state)
        if "progress" in state:
            self.phase_index, self.epoch = (int(x) for x in state["progress"])

    def save(self, path: str | Path) -> None:
        ckpt.save(path, self.state())

    # schedule ------------------------------------------------------------

    def run_epoch(self, instances: Sequence[Instance], phase: str, epoch: int) -> EpochLog:
        tf = phase == "pretrain"
        pool = [i for i in instances if not (tf and i.off_map)]
        p = PHASES.index(phase)
        order = batches(len(pool), self.config.train.batch_size, stream(self.config.seed, SHUFFLE_STREAM, p, epoch))
        sums = np.zeros(3)
        for idx in order:
            sums += train_step(self.model, self.opt, [pool[i] for i in idx], tf, (p, epoch))
        mean = sums / max(1, len(order))
        return EpochLog(phase, epoch, *map(float, mean))

    def fit(self, instances: Sequence[Instance], run_dir: str | Path | None = None,
            on_epoch: Callable[[EpochLog], None] | None = None) -> list[EpochLog]:
        run = Path(run_dir) if run_dir is not None else None
        if run is not None:
            run.mkdir(parents=True, exist_ok=True)
        while self.phase_index < len(PHASES):
            phase = PHASES[self.phase_index]
            n_epochs = self.config.train.epochs(phase)
            while self.epoch < n_epochs:
                entry = self.run_epoch(instances, phase, self.epoch)
                self.epoch += 1
                self.history.append(entry)
                log.info("%s epoch %d: bc=%.4f reg=%.4f total=%.4f", phase, entry.epoch, entry.l_bc, entry.l_reg,
                         entry.l)
                if run is not None:
                    append_log(run / "loss_log.csv", entry)
                    self.save(run / "last.ckpt")
                if on_epoch is not None:
                    on_epoch(entry)
            self.phase_index += 1
            self.epoch = 0
            if run is not None:
                self.save(run / f"{phase}.ckpt")
        if run is not None:
            self.save(run / "final.ckpt")
        return self.history


def append_log(path: Path, entry: EpochLog) -> None:
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        if new:
            w.writeheader()
        w.writerow(entry.row())


def read_log(path: str | Path) -> list[EpochLog]:
    with Path(path).open(newline="") as fh:
        return [EpochLog(r["phase"], int(r["epoch"]), float(r["l_bc"]), float(r["l_reg"]), float(r["l"]))
                for r in csv.DictReader(fh)]


def load_model(config: RunConfig, path: str | Path) -> TraversalModel:
    """Model with parameters from a checkpoint; architecture mismatches name the tensor."""
    model = TraversalModel(config)
    model.load_state(ckpt.load(path))
    return model
