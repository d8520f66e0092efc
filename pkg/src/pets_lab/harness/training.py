"""Source pretraining, the three-model adaptation loop, and ablation sweeps."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from statistics import median
from typing import Callable, Sequence

import numpy as np

from pets_lab import boxes as bx
from pets_lab import model as mdl
from pets_lab.evaluation import EvalReport, evaluate
from pets_lab.harness.config import ExperimentConfig
from pets_lab.harness.io import ROLES, Checkpoint, CurvePoint
from pets_lab.scheduler import (
    FlowStrategy,
    Phase,
    TrainerState,
    apply_flow,
    at_period_boundary,
    checksum,
    ema_update,
    warmup_lr,
)
from pets_lab.synthdata import (
    DomainConfig,
    Scene,
    make_prototypes,
    make_scenes,
    render_scenes,
    strong_aug,
    weak_aug,
)

log = logging.getLogger(__name__)

# Seed namespaces, appended to the configured seeds.
_SOURCE_TRAIN, _SOURCE_EVAL, _TARGET_TRAIN, _TARGET_EVAL = 1, 2, 3, 4
_PRETRAIN_RNG, _ADAPT_RNG, _INIT_RNG = 10, 11, 12

ABLATION_ROWS = ("baseline", "s_to_st", "dt_to_s", "dt_to_st", "swap", "single_dt", "single_st")


class DivergenceError(RuntimeError):
    pass


@dataclass
class LabeledSplit:
    scenes: list[Scene]
    fmaps: np.ndarray

    @property
    def ground_truth(self) -> dict[int, list[tuple[bx.BoxRect, int]]]:
        return {s.image_id: list(s.objects) for s in self.scenes}


class UnlabeledLoader:
    """Target-domain feature maps with their labels stripped."""

    def __init__(self, fmaps: np.ndarray, batch_size: int):
        self._fmaps = fmaps
        self.batch_size = batch_size

    def __len__(self) -> int:
        return math.ceil(len(self._fmaps) / self.batch_size)

    def epoch(self, rng: np.random.Generator):
        order = rng.permutation(len(self._fmaps))
        for start in range(0, len(order), self.batch_size):
            yield self._fmaps[order[start : start + self.batch_size]]


def prototypes_for(cfg: ExperimentConfig) -> np.ndarray:
    return make_prototypes(cfg.arch.K, cfg.arch.C, cfg.data.prototype_seed, cfg.data.prototype_norm)


def _split(cfg: ExperimentConfig, seed: Sequence[int], n: int, domain: DomainConfig) -> LabeledSplit:
    d = cfg.data
    scenes = make_scenes(
        seed, n, cfg.arch.K, d.max_objects, cfg.arch.G, size_cells=d.size_cells,
        center_jitter=d.center_jitter,
        contrast_range=d.contrast_range,
    )
    fmaps = render_scenes(scenes, domain, seed, prototypes_for(cfg), cfg.arch.G)
    return LabeledSplit(scenes, fmaps)


def source_train_split(cfg: ExperimentConfig) -> LabeledSplit:
    return _split(cfg, [cfg.data.source_seed, _SOURCE_TRAIN], cfg.data.num_source_scenes, DomainConfig())


def source_eval_split(cfg: ExperimentConfig) -> LabeledSplit:
    return _split(cfg, [cfg.data.source_seed, _SOURCE_EVAL], cfg.data.num_eval_scenes, DomainConfig())


def target_train_loader(cfg: ExperimentConfig) -> UnlabeledLoader:
    split = _split(cfg, [cfg.data.seed, _TARGET_TRAIN], cfg.data.num_target_scenes, cfg.data.domain)
    return UnlabeledLoader(split.fmaps, cfg.optimizer.batch_size)


def target_eval_split(cfg: ExperimentConfig) -> LabeledSplit:
    return _split(cfg, [cfg.data.seed, _TARGET_EVAL], cfg.data.num_eval_scenes, cfg.data.domain)


def _image_preds(preds: mdl.CellPredictions, i: int) -> mdl.CellPredictions:
    return mdl.CellPredictions(
        preds.objectness[i], preds.coarse[i], preds.class_logits[i], preds.refine[i]
    )


def _take(preds: mdl.CellPredictions, idx: Sequence[int]) -> mdl.CellPredictions:
    idx = np.asarray(idx, dtype=np.int64)
    return mdl.CellPredictions(
        preds.objectness[idx], preds.coarse[idx], preds.class_logits[idx], preds.refine[idx]
    )


def detect(
    params: np.ndarray, fmaps: np.ndarray, arch: mdl.Arch, obj_thresh: float, nms_iou: float
) -> list[list[bx.Detection]]:
    preds = mdl.forward(params, fmaps, arch)
    return [bx.nms(mdl.decode(_image_preds(preds, i), obj_thresh), nms_iou) for i in range(len(fmaps))]


def evaluate_params(params: np.ndarray, split: LabeledSplit, cfg: ExperimentConfig) -> EvalReport:
    dets = detect(params, split.fmaps, cfg.arch, cfg.pets.obj_thresh, cfg.pets.nms_iou)
    by_image = {s.image_id: d for s, d in zip(split.scenes, dets)}
    return evaluate(by_image, split.ground_truth, cfg.eval.iou)


def _check_finite(loss: mdl.LossBreakdown, where: str) -> None:
    if not math.isfinite(loss.total):
        raise DivergenceError(f"non-finite loss during {where}: {loss}")


def pretrain_source(cfg: ExperimentConfig, split: LabeledSplit | None = None) -> Checkpoint:
    """Supervised training on clean source scenes; target data is never touched."""
    arch, pc = cfg.arch, cfg.pretrain
    seed = cfg.data.source_seed
    params = mdl.init_params(arch, np.random.default_rng([seed, _INIT_RNG]))
    if pc.epochs == 0:
        return Checkpoint(arch, params, seed, 0)
    split = split or source_train_split(cfg)
    rng = np.random.default_rng([seed, _PRETRAIN_RNG])
    plain = [mdl.assign_targets(s.objects, arch.G) for s in split.scenes]
    flipped = [mdl.assign_targets(s.hflip().objects, arch.G) for s in split.scenes]
    n = len(split.scenes)
    for epoch in range(pc.epochs):
        order = rng.permutation(n)
        for start in range(0, n, pc.batch_size):
            idx = order[start : start + pc.batch_size]
            views, targets = [], []
            for i in idx:
                flip = rng.random() < cfg.aug.weak.flip_prob
                fmap = split.fmaps[i][:, ::-1, :] if flip else split.fmaps[i]
                if cfg.aug.weak.jitter_sigma > 0:
                    fmap = fmap + rng.normal(0.0, cfg.aug.weak.jitter_sigma, size=fmap.shape)
                views.append(fmap)
                targets.append(flipped[i] if flip else plain[i])
            loss, grad = mdl.loss_and_gradient(params, np.stack(views), mdl.stack_targets(targets), arch)
            _check_finite(loss, f"pretraining epoch {epoch}")
            params = mdl.sgd_step(params, grad, pc.lr)
    return Checkpoint(arch, params, seed, pc.epochs)


@dataclass
class AdaptResult:
    curves: list[CurvePoint]
    final: Checkpoint
    warnings: list[str] = field(default_factory=list)

    def final_map(self, role: str = "dynamic_teacher") -> float:
        return [c.map50 for c in self.curves if c.role == role][-1]

    def curve(self, role: str) -> list[float]:
        return [c.map50 for c in self.curves if c.role == role]


def _pseudo_labels(
    st: list[bx.Detection], dt: list[bx.Detection], cfg: ExperimentConfig
) -> list[bx.PseudoLabel]:
    ccfg = cfg.pets.consensus
    if cfg.pets.mode == "single_dt":
        labels = bx.single_teacher_labels(dt, ccfg)
    elif cfg.pets.mode == "single_st":
        labels = bx.single_teacher_labels(st, ccfg)
    else:
        labels = bx.consensus(st, dt, ccfg)
    return sorted(labels, key=lambda p: -p.fused_confidence)


def adapt(
    cfg: ExperimentConfig,
    source: Checkpoint,
    *,
    on_iteration: Callable[[TrainerState], None] | None = None,
    on_epoch_start: Callable[[int, TrainerState], None] | None = None,
) -> AdaptResult:
    """Adapt a source checkpoint to unlabeled target scenes.

    Each epoch optionally moves weights between models at its start, then
    runs the inner loop: teachers label the weak view, the student learns the
    strong view against those labels, and the dynamic teacher tracks the
    student by EMA. Only target feature maps reach any gradient; target labels
    are used for evaluation alone.

    ``on_epoch_start`` sees the state right after any exchange and
    ``on_iteration`` after every step; both are observation hooks only.
    """
    arch, oc, pc = cfg.arch, cfg.optimizer, cfg.pets
    if source.arch != arch:
        raise ValueError(f"checkpoint architecture {source.arch} does not match config {arch}")
    loader = target_train_loader(cfg)
    held_out = target_eval_split(cfg)
    rng = np.random.default_rng([cfg.data.seed, _ADAPT_RNG])
    state = TrainerState.from_source(source.params)
    strategy = FlowStrategy(pc.strategy)
    flows = pc.mode == "consensus"

    ipe = len(loader)
    warmup_iters = max(pc.warmup_epochs * ipe, 1)
    decay_iter = oc.decay_at * ipe if oc.lr_decay != 1.0 else None

    curves: list[CurvePoint] = []
    warnings: list[str] = []

    def record(epoch: int, losses: dict[str, float], num_labels: int) -> None:
        models = {
            "student": state.student,
            "static_teacher": state.static_teacher,
            "dynamic_teacher": state.dynamic_teacher,
        }
        for role in ROLES:
            report = evaluate_params(models[role], held_out, cfg)
            curves.append(CurvePoint(epoch, role, report.map50, losses.get(role, float("nan")), num_labels))

    record(0, {}, 0)
    for epoch in range(oc.epochs):
        if flows and at_period_boundary(epoch, pc.warmup_epochs):
            state = apply_flow(state, strategy)
        phase = Phase.ADAPTATION if epoch >= pc.warmup_epochs else Phase.WARMUP
        state = replace(state, phase=phase)
        static_sum = checksum(state.static_teacher)
        if on_epoch_start is not None:
            on_epoch_start(epoch, state)
        loss_sums = {role: 0.0 for role in ROLES}
        loss_count = 0
        num_labels = 0

        for batch in loader.epoch(rng):
            views = np.stack([weak_aug(f, None, rng, cfg.aug.weak)[0] for f in batch])
            st_preds = mdl.forward(state.static_teacher, views, arch)
            dt_preds = mdl.forward(state.dynamic_teacher, views, arch)
            kept, targets = [], []
            for i in range(len(views)):
                st_dets = mdl.decode(_image_preds(st_preds, i), pc.obj_thresh)
                dt_dets = mdl.decode(_image_preds(dt_preds, i), pc.obj_thresh)
                labels = _pseudo_labels(st_dets, dt_dets, cfg)
                if not labels:
                    continue
                num_labels += len(labels)
                kept.append(i)
                targets.append(mdl.assign_targets([(p.box, p.class_id) for p in labels], arch.G))

            if kept:
                strong = np.stack([strong_aug(views[i], rng, cfg.aug.strong) for i in kept])
                tgt = mdl.stack_targets(targets)
                lr = warmup_lr(state.iteration, warmup_iters, oc.base_lr, decay_iter, oc.lr_decay)
                loss, grad = mdl.loss_and_gradient(state.student, strong, tgt, arch)
                _check_finite(loss, f"adaptation epoch {epoch}")
                loss_sums["student"] += loss.total
                loss_sums["static_teacher"] += mdl.detection_loss(_take(st_preds, kept), tgt).total
                loss_sums["dynamic_teacher"] += mdl.detection_loss(_take(dt_preds, kept), tgt).total
                loss_count += 1
                state = replace(state, student=mdl.sgd_step(state.student, grad, lr))

            state = replace(state, iteration=state.iteration + 1)
            if state.iteration % pc.ema_stepsize == 0:
                state = ema_update(state, pc.ema_alpha)
            if checksum(state.static_teacher) != static_sum:
                raise AssertionError("static teacher changed inside a period")
            if on_iteration is not None:
                on_iteration(state)

        if num_labels == 0:
            msg = f"epoch {epoch}: no pseudo labels produced"
            log.warning(msg)
            warnings.append(msg)
        if (epoch + 1) % cfg.eval.eval_every == 0:
            means = {r: (v / loss_count if loss_count else float("nan")) for r, v in loss_sums.items()}
            record(epoch + 1, means, num_labels)

    final = Checkpoint(arch, state.dynamic_teacher.copy(), cfg.data.seed, oc.epochs, state)
    return AdaptResult(curves, final, warnings)


def config_for_row(cfg: ExperimentConfig, row: str) -> ExperimentConfig:
    if row == "single_dt":
        return cfg.with_pets(mode="single_dt", strategy="baseline")
    if row == "single_st":
        return cfg.with_pets(mode="single_st", strategy="baseline")
    return cfg.with_pets(mode="consensus", strategy=row)


@dataclass
class AblationRow:
    row: str
    seed: int
    final_map50: float
    max_drawdown: float


def max_drawdown(values: Sequence[float]) -> float:
    """Largest peak-to-trough drop of a curve."""
    peak, worst = -math.inf, 0.0
    for v in values:
        peak = max(peak, v)
        worst = max(worst, peak - v)
    return worst


def run_ablation(
    cfg: ExperimentConfig,
    source: Checkpoint,
    seeds: Sequence[int] = (0,),
    rows: Sequence[str] = ABLATION_ROWS,
    on_result: Callable[[str, int, AdaptResult], None] | None = None,
) -> list[AblationRow]:
    out = []
    for row in rows:
        for seed in seeds:
            result = adapt(config_for_row(cfg, row).with_seed(seed), source)
            if on_result is not None:
                on_result(row, seed, result)
            dt_curve = result.curve("dynamic_teacher")
            out.append(AblationRow(row, seed, dt_curve[-1], max_drawdown(dt_curve)))
    return out


def summarize_ablation(rows: Sequence[AblationRow]) -> dict[str, float]:
    by_row: dict[str, list[float]] = {}
    for r in rows:
        by_row.setdefault(r.row, []).append(r.final_map50)
    return {row: median(vals) for row, vals in by_row.items()}
