"""Checkpoint JSON and curve CSV serialization."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from pets_lab.model import Arch
from pets_lab.scheduler import Phase, TrainerState

FORMAT_VERSION = 1
CURVE_HEADER = ["epoch", "role", "map50", "mean_total_loss", "num_pseudo_labels"]
ROLES = ("student", "static_teacher", "dynamic_teacher")


@dataclass(frozen=True)
class CurvePoint:
    epoch: int
    role: str
    map50: float
    mean_total_loss: float
    num_pseudo_labels: int


@dataclass
class Checkpoint:
    arch: Arch
    params: np.ndarray
    rng_seed: int
    trained_epochs: int
    state: TrainerState | None = None

    def to_dict(self) -> dict:
        out = {
            "format_version": FORMAT_VERSION,
            "arch": {"G": self.arch.G, "C": self.arch.C, "K": self.arch.K, "H": self.arch.H},
            "params": [float(v) for v in self.params],
            "rng_seed": self.rng_seed,
            "trained_epochs": self.trained_epochs,
        }
        if self.state is not None:
            s = self.state
            out["trainer_state"] = {
                "student": [float(v) for v in s.student],
                "static_teacher": [float(v) for v in s.static_teacher],
                "dynamic_teacher": [float(v) for v in s.dynamic_teacher],
                "period": s.period,
                "iteration": s.iteration,
                "phase": s.phase.value,
            }
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "Checkpoint":
        if raw.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {raw.get('format_version')!r}")
        arch = Arch(**raw["arch"])
        params = np.array(raw["params"], dtype=np.float64)
        arch.unpack(params)
        state = None
        if "trainer_state" in raw:
            ts = raw["trainer_state"]
            state = TrainerState(
                student=np.array(ts["student"], dtype=np.float64),
                static_teacher=np.array(ts["static_teacher"], dtype=np.float64),
                dynamic_teacher=np.array(ts["dynamic_teacher"], dtype=np.float64),
                period=int(ts["period"]),
                iteration=int(ts["iteration"]),
                phase=Phase(ts["phase"]),
            )
        return cls(arch, params, int(raw["rng_seed"]), int(raw["trained_epochs"]), state)

    def dumps(self) -> str:
        # repr-based float formatting in json round-trips float64 exactly.
        return json.dumps(self.to_dict(), indent=1) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def curves_to_csv(curves: Iterable[CurvePoint]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CURVE_HEADER)
    for c in curves:
        writer.writerow([c.epoch, c.role, repr(float(c.map50)), repr(float(c.mean_total_loss)), c.num_pseudo_labels])
    return buf.getvalue()


def export_curves(curves: Sequence[CurvePoint], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(curves_to_csv(curves))
    return path


def read_curves(path: str | Path) -> list[CurvePoint]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        CurvePoint(
            int(r["epoch"]),
            r["role"],
            float(r["map50"]),
            float(r["mean_total_loss"]),
            int(r["num_pseudo_labels"]),
        )
        for r in rows
    ]
