"""Control laws for the student / static-teacher / dynamic-teacher trio."""

from __future__ import annotations

import enum
import zlib
from dataclasses import dataclass, replace

import numpy as np


class Phase(str, enum.Enum):
    WARMUP = "warmup"
    ADAPTATION = "adaptation"


class FlowStrategy(str, enum.Enum):
    """How weights move between models at a period boundary."""

    BASELINE = "baseline"
    STUDENT_TO_STATIC = "s_to_st"
    DYNAMIC_TO_STUDENT = "dt_to_s"
    DYNAMIC_TO_STATIC = "dt_to_st"
    SWAP = "swap"


@dataclass(frozen=True)
class TrainerState:
    student: np.ndarray
    static_teacher: np.ndarray
    dynamic_teacher: np.ndarray
    period: int = 0
    iteration: int = 0
    phase: Phase = Phase.WARMUP

    def __post_init__(self) -> None:
        n = self.student.shape
        if self.static_teacher.shape != n or self.dynamic_teacher.shape != n:
            raise ValueError("student and teachers must have identical parameter counts")
        if self.period < 0 or self.iteration < 0:
            raise ValueError("counters must be non-negative")

    @classmethod
    def from_source(cls, params: np.ndarray) -> "TrainerState":
        params = np.asarray(params, dtype=np.float64)
        return cls(params.copy(), params.copy(), params.copy())


def checksum(vec: np.ndarray) -> int:
    return zlib.crc32(np.ascontiguousarray(vec, dtype=np.float64).tobytes())


def ema_update(state: TrainerState, alpha: float) -> TrainerState:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha={alpha} outside [0, 1]")
    dt = alpha * state.dynamic_teacher + (1.0 - alpha) * state.student
    return replace(state, dynamic_teacher=dt)


def apply_flow(state: TrainerState, strategy: FlowStrategy | str) -> TrainerState:
    strategy = FlowStrategy(strategy)
    s, st, dt = state.student, state.static_teacher, state.dynamic_teacher
    if strategy is FlowStrategy.STUDENT_TO_STATIC:
        st = s.copy()
    elif strategy is FlowStrategy.DYNAMIC_TO_STUDENT:
        s = dt.copy()
    elif strategy is FlowStrategy.DYNAMIC_TO_STATIC:
        st = dt.copy()
    elif strategy is FlowStrategy.SWAP:
        s, st = st, s
    return replace(state, student=s, static_teacher=st, dynamic_teacher=dt, period=state.period + 1)


def warmup_lr(
    iteration: int,
    warmup_iters: int,
    base_lr: float,
    decay_iter: int | None = None,
    decay_rate: float = 0.1,
) -> float:
    """Linear ramp from 0 to ``base_lr``, then constant with an optional step decay."""
    if warmup_iters < 1:
        raise ValueError("warmup_iters must be >= 1")
    lr = min(iteration / warmup_iters, 1.0) * base_lr
    if decay_iter is not None and iteration >= decay_iter:
        lr *= decay_rate
    return lr


def at_period_boundary(epoch: int, warmup_epochs: int = 2) -> bool:
    """Whether weights flow at the boundary entering ``epoch``.

    The training loop checks this at the top of each epoch, as the exchange
    precedes the inner loop. Epochs ``0 .. warmup_epochs - 1`` keep the static
    teacher frozen; every later epoch starts with an exchange.
    """
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return epoch >= warmup_epochs
