"""Oracle self-checks: each compares a production routine with a slow, direct evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from pets_lab import boxes as bx
from pets_lab import model as mdl
from pets_lab.evaluation import average_precision
from pets_lab.scheduler import TrainerState, apply_flow, ema_update

GradFn = Callable[[np.ndarray, np.ndarray, mdl.CellTargets, mdl.Arch], np.ndarray]


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


# ---------------------------------------------------------------- oracles


def finite_difference_gradient(
    params: np.ndarray, fmap: np.ndarray, targets: mdl.CellTargets, arch: mdl.Arch, step: float = 1e-5
) -> np.ndarray:
    """Central differences of the total loss, one coordinate at a time."""

    def total(p: np.ndarray) -> float:
        return mdl.detection_loss(mdl.forward(p, fmap, arch), targets).total

    grad = np.empty_like(params)
    for k in range(params.size):
        up, down = params.copy(), params.copy()
        up[k] += step
        down[k] -= step
        grad[k] = (total(up) - total(down)) / (2.0 * step)
    return grad


def brute_force_wbf(
    st: Sequence[tuple[Sequence[float], float]], dt: Sequence[tuple[Sequence[float], float]], beta: float
) -> tuple[list[float], float]:
    """Direct summation of the fusion formula over (coords, confidence) pairs."""
    c_total = 0.0
    num = [0.0, 0.0, 0.0, 0.0]
    for coords, c in list(st) + list(dt):
        c_total += c
        for k in range(4):
            num[k] += c * coords[k]
    box = [v / c_total for v in num]
    conf = beta / len(st) * sum(c for _, c in st) + (1.0 - beta) / len(dt) * sum(c for _, c in dt)
    return box, conf


def brute_force_ap(flags: Sequence[tuple[float, bool]], num_gt: int) -> float:
    """AP by explicit envelope lookup at each rank where recall increases."""
    if num_gt == 0 or not flags:
        return 0.0
    ranked = sorted(flags, key=lambda f: -f[0])
    points = []
    tp = 0
    for rank, (_, hit) in enumerate(ranked, start=1):
        tp += hit
        points.append((tp / num_gt, tp / rank))
    ap, prev_recall = 0.0, 0.0
    for recall, _ in points:
        if recall > prev_recall:
            best = max(p for r, p in points if r >= recall)
            ap += (recall - prev_recall) * best
            prev_recall = recall
    return ap


# ----------------------------------------------------------------- random instances


def random_instance(rng: np.random.Generator) -> tuple[mdl.Arch, np.ndarray, np.ndarray, mdl.CellTargets]:
    """A small random (arch, params, feature maps, targets) problem."""
    arch = mdl.Arch(
        G=int(rng.integers(2, 5)),
        C=int(rng.integers(1, 5)),
        K=int(rng.integers(1, 4)),
        H=int(rng.integers(0, 5)),
    )
    params = rng.normal(0.0, 0.7, size=arch.num_params)
    batch = int(rng.integers(1, 3))
    fmap = rng.normal(0.0, 1.0, size=(batch, arch.G, arch.G, arch.C))
    targets = []
    for _ in range(batch):
        labels = []
        for _ in range(int(rng.integers(0, 3))):
            w, h = rng.uniform(0.15, 0.6, size=2)
            x1, y1 = rng.uniform(0.0, 1.0 - w), rng.uniform(0.0, 1.0 - h)
            labels.append((bx.BoxRect(x1, y1, x1 + w, y1 + h), int(rng.integers(arch.K))))
        targets.append(mdl.assign_targets(labels, arch.G))
    return arch, params, fmap, mdl.stack_targets(targets)


def _random_det(rng: np.random.Generator, class_id: int = 0) -> bx.Detection:
    w, h = rng.uniform(0.05, 0.5, size=2)
    x1, y1 = rng.uniform(0.0, 1.0 - w), rng.uniform(0.0, 1.0 - h)
    return bx.Detection(bx.BoxRect(x1, y1, x1 + w, y1 + h), class_id, float(rng.uniform(0.01, 1.0)))


# ----------------------------------------------------------------- checks


def check_gradient(
    seed: int = 0, instances: int = 20, tol: float = 1e-4, grad_fn: GradFn | None = None
) -> CheckResult:
    grad_fn = grad_fn or mdl.loss_gradient
    rng = np.random.default_rng([seed, 101])
    worst = 0.0
    for _ in range(instances):
        arch, params, fmap, targets = random_instance(rng)
        analytic = grad_fn(params, fmap, targets, arch)
        numeric = finite_difference_gradient(params, fmap, targets, arch)
        rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-5)
        worst = max(worst, float(rel.max()))
    return CheckResult("gradient", worst < tol, f"max relative error {worst:.2e} over {instances} instances")


def check_wbf(seed: int = 0, clusters: int = 500, tol: float = 1e-9) -> CheckResult:
    rng = np.random.default_rng([seed, 102])
    worst, symmetric, beta_free = 0.0, True, True
    for _ in range(clusters):
        st = [_random_det(rng) for _ in range(int(rng.integers(1, 5)))]
        dt = [_random_det(rng) for _ in range(int(rng.integers(1, 5)))]
        beta = float(rng.uniform())
        fused = bx.wbf_fuse(st, dt, beta)
        box, conf = brute_force_wbf(
            [(d.box.as_tuple(), d.confidence) for d in st], [(d.box.as_tuple(), d.confidence) for d in dt], beta
        )
        worst = max(worst, max(abs(a - b) for a, b in zip(fused.box.as_tuple(), box)), abs(fused.fused_confidence - conf))
        beta_free &= bx.wbf_fuse(st, dt, 0.0).box == bx.wbf_fuse(st, dt, 1.0).box == fused.box
        a, b = bx.wbf_fuse(st, dt, 0.5), bx.wbf_fuse(dt, st, 0.5)
        symmetric &= abs(a.fused_confidence - b.fused_confidence) <= tol and all(
            abs(u - v) <= tol for u, v in zip(a.box.as_tuple(), b.box.as_tuple())
        )
    ok = worst <= tol and beta_free and symmetric
    return CheckResult(
        "wbf", ok, f"max deviation {worst:.1e}; box independent of beta: {beta_free}; swap symmetric: {symmetric}"
    )


def check_ema(seed: int = 0, alpha: float = 0.999, steps: int = 1000, tol: float = 1e-9) -> CheckResult:
    rng = np.random.default_rng([seed, 103])
    student = rng.normal(size=16)
    state = TrainerState(student, student.copy(), student + rng.normal(size=16))
    err0 = state.dynamic_teacher - student
    worst = 0.0
    for k in range(1, steps + 1):
        state = ema_update(state, alpha)
        worst = max(worst, float(np.abs((state.dynamic_teacher - student) - alpha**k * err0).max()))
    return CheckResult("ema", worst <= tol, f"max deviation from alpha^k decay {worst:.1e} over {steps} steps")


def check_exchange(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng([seed, 104])
    s0, st0, dt0 = (rng.normal(size=32) for _ in range(3))
    state = TrainerState(s0.copy(), st0.copy(), dt0.copy())
    once = apply_flow(state, "swap")
    twice = apply_flow(once, "swap")
    ok = (
        once.student.tobytes() == st0.tobytes()
        and once.static_teacher.tobytes() == s0.tobytes()
        and twice.student.tobytes() == s0.tobytes()
        and twice.static_teacher.tobytes() == st0.tobytes()
        and twice.dynamic_teacher.tobytes() == dt0.tobytes()
    )
    return CheckResult("exchange", ok, "swap applied twice restores every model bit-exactly" if ok else "swap is not an involution")


def check_ap(seed: int = 0, instances: int = 200) -> CheckResult:
    hand = [
        average_precision([(0.9, True), (0.8, True)], 2) == 1.0,
        average_precision([], 3) == 0.0,
        abs(average_precision([(0.9, True), (0.8, False), (0.7, True)], 2) - 5 / 6) < 1e-12,
    ]
    rng = np.random.default_rng([seed, 105])
    mismatches = 0
    for _ in range(instances):
        n = int(rng.integers(0, 6))
        flags = [(float(c), bool(rng.random() < 0.5)) for c in rng.permutation(n) / max(n, 1) + 0.01]
        num_gt = sum(h for _, h in flags) + int(rng.integers(0, 3))
        if abs(average_precision(flags, num_gt) - brute_force_ap(flags, num_gt)) > 1e-12:
            mismatches += 1
    ok = all(hand) and mismatches == 0
    return CheckResult("ap", ok, f"hand cases {sum(hand)}/3; oracle mismatches {mismatches}/{instances}")


def run_selfcheck(seed: int = 0, grad_fn: GradFn | None = None) -> list[CheckResult]:
    """Run every oracle check. ``grad_fn`` replaces the analytic gradient (for mutation tests)."""
    return [
        check_gradient(seed, grad_fn=grad_fn),
        check_wbf(seed),
        check_ema(seed),
        check_exchange(seed),
        check_ap(seed),
    ]
