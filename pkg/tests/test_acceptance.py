"""Acceptance gate: one PASS/FAIL line per criterion, each at its stated tolerance.

Criteria 6-8 share one set of 5-seed adaptation runs from a single source
checkpoint trained on the default config.
"""

import time
from statistics import median

import numpy as np
import pytest

from pets_lab import boxes as bx
from pets_lab import model as mdl
from pets_lab.evaluation import average_precision
from pets_lab.harness import training as T
from pets_lab.harness.config import ExperimentConfig
from pets_lab.harness.io import curves_to_csv
from pets_lab.harness.selfcheck import (
    brute_force_ap,
    brute_force_wbf,
    finite_difference_gradient,
    random_instance,
)
from pets_lab.scheduler import TrainerState, apply_flow, checksum, ema_update

SEEDS = (0, 1, 2, 3, 4)
ROLES = ("student", "static_teacher", "dynamic_teacher")


def report(capsys, number: int, passed: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\nACCEPTANCE {number}: {'PASS' if passed else 'FAIL'} - {detail}")


class Lab:
    """Lazily computed, shared experiment state for the behavioral criteria."""

    def __init__(self):
        self.cfg = ExperimentConfig()
        self._source = None
        self._pretrain_seconds = None
        self._runs = {}
        self.adapt_seconds = 0.0

    @property
    def source(self):
        if self._source is None:
            t0 = time.process_time()
            self._source = T.pretrain_source(self.cfg)
            self._pretrain_seconds = time.process_time() - t0
        return self._source

    @property
    def pretrain_seconds(self) -> float:
        self.source
        return self._pretrain_seconds

    def run(self, row: str, seed: int) -> T.AdaptResult:
        key = (row, seed)
        if key not in self._runs:
            t0 = time.process_time()
            self._runs[key] = T.adapt(T.config_for_row(self.cfg, row).with_seed(seed), self.source)
            self.adapt_seconds += time.process_time() - t0
        return self._runs[key]

    def finals(self, row: str) -> list[float]:
        return [self.run(row, s).final_map("dynamic_teacher") for s in SEEDS]

    def source_only(self) -> list[float]:
        return [
            T.evaluate_params(self.source.params, T.target_eval_split(self.cfg.with_seed(s)), self.cfg).map50
            for s in SEEDS
        ]


@pytest.fixture(scope="module")
def lab():
    return Lab()


def test_1_gradient_oracle(capsys):
    t0 = time.process_time()
    rng = np.random.default_rng(1)
    worst = 0.0
    count = 0
    while count < 20:
        arch, params, fmap, targets = random_instance(rng)
        assert arch.G <= 4 and arch.C <= 4 and arch.K <= 3
        analytic = mdl.loss_gradient(params, fmap, targets, arch)
        numeric = finite_difference_gradient(params, fmap, targets, arch, step=1e-5)
        rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-5)
        worst = max(worst, float(rel.max()))
        count += 1
    seconds = time.process_time() - t0
    ok = worst < 1e-4 and seconds < 30
    report(capsys, 1, ok, f"max relative error {worst:.2e} on {count} instances, {seconds:.1f}s")
    assert ok


def test_2_wbf_oracle(capsys):
    t0 = time.process_time()
    rng = np.random.default_rng(2)

    def rand_det():
        w, h = rng.uniform(0.05, 0.5, size=2)
        x1, y1 = rng.uniform(0, 1 - w), rng.uniform(0, 1 - h)
        return bx.Detection(bx.BoxRect(x1, y1, x1 + w, y1 + h), 0, float(rng.uniform(0.01, 1.0)))

    worst, beta_exact, swap_exact = 0.0, True, True
    for _ in range(500):
        st = [rand_det() for _ in range(int(rng.integers(1, 5)))]
        dt = [rand_det() for _ in range(int(rng.integers(1, 5)))]
        beta = float(rng.uniform())
        fused = bx.wbf_fuse(st, dt, beta)
        box, conf = brute_force_wbf([(d.box.as_tuple(), d.confidence) for d in st], [(d.box.as_tuple(), d.confidence) for d in dt], beta)
        worst = max(worst, *(abs(a - b) for a, b in zip(fused.box.as_tuple(), box)), abs(fused.fused_confidence - conf))
        beta_exact &= bx.wbf_fuse(st, dt, 0.0).box == fused.box == bx.wbf_fuse(st, dt, 1.0).box
        a, b = bx.wbf_fuse(st, dt, 0.5), bx.wbf_fuse(dt, st, 0.5)
        # Exact up to the order of floating-point summation.
        swap_exact &= max(abs(u - v) for u, v in zip(a.box.as_tuple(), b.box.as_tuple())) <= 1e-15
        swap_exact &= abs(a.fused_confidence - b.fused_confidence) <= 1e-15
    seconds = time.process_time() - t0
    ok = worst <= 1e-9 and beta_exact and swap_exact and seconds < 5
    report(capsys, 2, ok, f"max deviation {worst:.1e}, beta-invariant {beta_exact}, swap-symmetric {swap_exact}, {seconds:.2f}s")
    assert ok


def test_3_ema_exchange_algebra(capsys, lab):
    t0 = time.process_time()
    rng = np.random.default_rng(3)
    s = rng.normal(size=50)
    state = TrainerState(s, s.copy(), s + rng.normal(size=50))
    err0 = state.dynamic_teacher - s
    worst = 0.0
    for k in range(1, 1001):
        state = ema_update(state, 0.999)
        worst = max(worst, float(np.abs(state.dynamic_teacher - s - 0.999**k * err0).max()))

    a, b, c = (rng.normal(size=50) for _ in range(3))
    st0 = TrainerState(a, b, c)
    twice = apply_flow(apply_flow(st0, "swap"), "swap")
    involution = all(getattr(twice, f).tobytes() == getattr(st0, f).tobytes() for f in ("student", "static_teacher", "dynamic_teacher"))
    algebra_seconds = time.process_time() - t0

    # Static-teacher checksum inside every period of a full default run.
    sums: dict[int, set[int]] = {}
    ipe = len(T.target_train_loader(lab.cfg))

    def on_iter(state):
        sums.setdefault((state.iteration - 1) // ipe, set()).add(checksum(state.static_teacher))

    T.adapt(lab.cfg, lab.source, on_iteration=on_iter)
    constant = all(len(v) == 1 for v in sums.values()) and len(sums) == lab.cfg.optimizer.epochs
    ok = worst <= 1e-9 and involution and constant and algebra_seconds < 5
    report(
        capsys, 3, ok,
        f"EMA deviation {worst:.1e}, swap involution {involution}, static checksum constant in all {len(sums)} periods {constant}, {algebra_seconds:.2f}s",
    )
    assert ok


def test_4_average_precision(capsys):
    t0 = time.process_time()
    hand = [
        average_precision([(0.9, True), (0.8, True), (0.5, True)], 3) == 1.0,
        average_precision([], 2) == 0.0,
        abs(average_precision([(0.9, True), (0.8, False), (0.7, True)], 2) - 5 / 6) <= 1e-15,
    ]
    rng = np.random.default_rng(4)
    bad = 0
    for _ in range(200):
        n = int(rng.integers(1, 6))
        conf = rng.permutation(n) / n + 0.05
        flags = [(float(c), bool(h)) for c, h in zip(conf, rng.random(n) < 0.6)]
        num_gt = sum(h for _, h in flags) + int(rng.integers(0, 3))
        ap = average_precision(flags, num_gt)
        rescaled = average_precision([(np.exp(3 * c), h) for c, h in flags], num_gt)
        if abs(ap - brute_force_ap(flags, num_gt)) > 1e-12 or abs(ap - rescaled) > 1e-12:
            bad += 1
    seconds = time.process_time() - t0
    ok = all(hand) and bad == 0 and seconds < 10
    report(capsys, 4, ok, f"hand cases {sum(hand)}/3, oracle/monotone violations {bad}/200, {seconds:.2f}s")
    assert ok


def test_5_source_sanity_floor(capsys, lab):
    t0 = time.process_time()
    source_map = T.evaluate_params(lab.source.params, T.source_eval_split(lab.cfg), lab.cfg).map50
    target_map = T.evaluate_params(lab.source.params, T.target_eval_split(lab.cfg), lab.cfg).map50
    seconds = lab.pretrain_seconds + time.process_time() - t0
    drop = source_map - target_map
    ok = source_map >= 0.9 and drop >= 0.20 and seconds < 300
    report(capsys, 5, ok, f"source mAP {source_map:.3f}, {lab.cfg.data.fog} mAP {target_map:.3f}, drop {100 * drop:.1f} points, {seconds:.1f}s")
    assert ok


def test_6_adaptation_gain(capsys, lab):
    pets = median(lab.finals("swap"))
    single = median(lab.finals("single_dt"))
    src = median(lab.source_only())
    ok = pets > single > src and pets - single >= 0.02 and lab.adapt_seconds < 1800
    report(
        capsys, 6, ok,
        f"median final DT mAP: PETS {pets:.3f}, single-DT {single:.3f}, source-only {src:.3f} "
        f"(margin {100 * (pets - single):+.1f} points), adapt CPU {lab.adapt_seconds:.0f}s",
    )
    assert ok


def test_7_strategy_ordering(capsys, lab):
    med = {row: median(lab.finals(row)) for row in ("baseline", "s_to_st", "dt_to_s", "dt_to_st", "swap")}
    violations = []
    for row in ("s_to_st", "dt_to_s", "dt_to_st"):
        if med[row] - med["swap"] > 0.01:
            violations.append(f"{row} above swap by {100 * (med[row] - med['swap']):.1f}")
        if med["baseline"] - med[row] > 0.01:
            violations.append(f"baseline above {row} by {100 * (med['baseline'] - med[row]):.1f}")
    ok = not violations
    table = ", ".join(f"{r} {v:.3f}" for r, v in med.items())
    report(capsys, 7, ok, table + ("" if ok else f"; violations: {'; '.join(violations)}"))
    assert ok


def test_8_stability(capsys, lab):
    dd_pets = [T.max_drawdown(lab.run("swap", s).curve("dynamic_teacher")) for s in SEEDS]
    dd_single = [T.max_drawdown(lab.run("single_dt", s).curve("dynamic_teacher")) for s in SEEDS]
    wins = sum(p < q for p, q in zip(dd_pets, dd_single))
    role_medians = {r: median(lab.run("swap", s).final_map(r) for s in SEEDS) for r in ROLES}
    spread = max(role_medians.values()) - min(role_medians.values())
    ok = wins >= 4 and spread <= 0.03
    report(
        capsys, 8, ok,
        f"PETS drawdown smaller on {wins}/5 seeds (PETS {np.round(dd_pets, 3).tolist()}, single-DT {np.round(dd_single, 3).tolist()}); "
        f"PETS role medians {', '.join(f'{r} {v:.3f}' for r, v in role_medians.items())} (spread {100 * spread:.1f} points)",
    )
    assert ok


def test_9_determinism(capsys, lab):
    first = lab.run("swap", 0)
    second = T.adapt(lab.cfg.with_seed(0), lab.source)
    same_csv = curves_to_csv(first.curves).encode() == curves_to_csv(second.curves).encode()
    same_ckpt = first.final.dumps().encode() == second.final.dumps().encode()
    ok = same_csv and same_ckpt
    report(capsys, 9, ok, f"curve CSV identical {same_csv}, checkpoint identical {same_ckpt}")
    assert ok
