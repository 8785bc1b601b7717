"""Desk-scale teacher/student training on synthetic pixel grids.

Three modes share one loop:

* ``mllc``: graph refinement on both streams; teacher outputs give the
  pseudo-labels and prototype targets, the student's refined outputs carry
  the gradient.
* ``self_training``: teacher argmax pseudo-labels kept where the teacher is
  more confident than sigma, no graphs.
* ``supervised``: labeled images only.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diagnostics
from .losses import (LossConfig, PrototypeBank, clg_weighted_ce, compute_prototypes,
                     ema_update_prototypes, slg_contrastive_loss, supervised_ce)
from .metrics import confusion, miou, pseudo_label_accuracy
from .nn import (Network, OptimizerState, TeacherState, TrainingDivergenceError, build_network,
                 mlp_backward, mlp_forward, sgd_step, teacher_update)
from .refine import RefineConfig, aggregate_pseudo_labels, refine, refine_backward
from .synth import SynthBatch, strong_extra, weak_augment
from .tensor_store import IGNORE, seeded_rng

log = logging.getLogger(__name__)

MODES = ("mllc", "self_training", "supervised")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 4
    base_lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    teacher_decay: float = 0.99
    teacher_warmup: bool = True
    unsup_ramp_epochs: int = 5
    eval_interval: int = 0
    hidden: int = 32
    embed_dim: int = 16
    mode: str = "mllc"
    refine: RefineConfig = field(default_factory=RefineConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError("batch_size must be even: labeled and unlabeled halves are equal")
        if self.epochs < 1 or self.base_lr < 0:
            raise ValueError("epochs must be >= 1 and base_lr >= 0")


@dataclass
class Models:
    student: Network
    teacher: Network
    teacher_state: TeacherState
    optimizer: OptimizerState
    banks: list[PrototypeBank]


@dataclass
class TrainRecord:
    steps: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0

    def lines(self) -> list[str]:
        rows = [{"kind": "step", **r} for r in self.steps] + [{"kind": "eval", **r} for r in self.evals]
        rows.sort(key=lambda r: (r["step"], r["kind"] == "eval"))
        return [json.dumps(r, sort_keys=True) for r in rows]


def init_models(cfg: TrainConfig, raw_dim: int, num_classes: int, total_iter: int) -> Models:
    rng = seeded_rng(cfg.seed)
    student = build_network(raw_dim, cfg.hidden, num_classes, cfg.embed_dim, cfg.refine.K, rng)
    teacher = student.copy()
    state = TeacherState(teacher.params(), cfg.teacher_decay)
    opt = OptimizerState(cfg.base_lr, total_iter, cfg.momentum)
    banks = [PrototypeBank.empty(num_classes, cfg.embed_dim, cfg.loss.beta, cfg.loss.literal_ema)
             for _ in range(cfg.refine.K)]
    return Models(student, teacher, state, opt, banks)


def forward_heads(net: Network, images: np.ndarray):
    h, cb = mlp_forward(net["backbone"], images)
    probs, cc = mlp_forward(net["cls_head"], h)
    emb, ce = mlp_forward(net["emb_head"], h)
    return probs, emb, (cb, cc, ce)


def backward_heads(net: Network, caches, d_probs, d_emb, grads: dict) -> None:
    cb, cc, ce = caches
    dh = np.zeros_like(cb.out)
    for name, cache, g in (("cls_head", cc, d_probs), ("emb_head", ce, d_emb)):
        if g is None:
            continue
        pg, dx = mlp_backward(net[name], cache, g)
        _accumulate(grads, name, pg)
        dh += dx
    pg, _ = mlp_backward(net["backbone"], cb, dh)
    _accumulate(grads, "backbone", pg)


def _accumulate(grads: dict, layer: str, pg: dict) -> None:
    for p, g in pg.items():
        key = f"{layer}.{p}"
        grads[key] = grads[key] + g if key in grads else g


def _stack(batches: list[SynthBatch]):
    return np.vstack([b.images for b in batches]), np.concatenate([b.gt for b in batches])


def teacher_targets(models: Models, images: np.ndarray, cfg: TrainConfig, rng):
    """Teacher pass without gradients: refined rounds and aggregated pseudo-labels."""
    probs, emb, _ = forward_heads(models.teacher, images)
    res = refine(emb, probs, probs, cfg.refine, models.teacher.graph_layers(cfg.refine.K), rng=rng)
    return res, aggregate_pseudo_labels(res.round_probs)


def unsup_mllc(models: Models, weak: np.ndarray, strong: np.ndarray, cfg: TrainConfig, rng, grads: dict,
               scale: float) -> dict:
    K = cfg.refine.K
    lc = cfg.loss
    t_res, pseudo = teacher_targets(models, weak, cfg, rng)
    for k in range(K):
        unit = t_res.round_features[k] / np.maximum(
            np.linalg.norm(t_res.round_features[k], axis=1, keepdims=True), 1e-12)
        protos, present = compute_prototypes(unit, pseudo, models.banks[k].protos.shape[0])
        models.banks[k] = ema_update_prototypes(models.banks[k], protos, present)

    probs, emb, caches = forward_heads(models.student, strong)
    layers = models.student.graph_layers(K)
    s_res = refine(emb, probs, probs, cfg.refine, layers, rng=rng, record=True)
    clg_total, clg_grads = clg_weighted_ce(s_res.round_probs, pseudo, lc.dynamic_weight)
    slg_losses, slg_grads = [], []
    for k in range(K):
        loss_k, g_k = slg_contrastive_loss(s_res.round_features[k], pseudo, models.banks[k], lc, rng)
        slg_losses.append(loss_k)
        slg_grads.append(g_k)
    unsup = lc.lambda_slg * float(sum(slg_losses)) + lc.lambda_clg * clg_total
    out = {"loss_unsup": unsup, "loss_slg": float(sum(slg_losses)), "loss_clg": clg_total}
    if scale == 0.0:
        return out
    gp = [scale * lc.lambda_clg * g for g in clg_grads]
    gf = [scale * lc.lambda_slg * g for g in slg_grads]
    layer_grads, d_probs, d_emb = refine_backward(s_res, layers, gp, gf)
    for k, (gc, gs) in enumerate(layer_grads):
        _accumulate(grads, f"f_c.{k}", gc)
        _accumulate(grads, f"f_s.{k}", gs)
    backward_heads(models.student, caches, d_probs, d_emb, grads)
    return out


def unsup_self_training(models: Models, weak: np.ndarray, strong: np.ndarray, cfg: TrainConfig,
                        grads: dict, scale: float) -> dict:
    t_probs, _, _ = forward_heads(models.teacher, weak)
    pseudo = np.where(t_probs.max(axis=1) > cfg.refine.sigma, t_probs.argmax(axis=1), IGNORE)
    probs, _, caches = forward_heads(models.student, strong)
    loss, g = supervised_ce(probs, pseudo)
    if scale != 0.0:
        backward_heads(models.student, caches, scale * g, None, grads)
    return {"loss_unsup": loss, "kept": int((pseudo != IGNORE).sum())}


def teacher_decay(cfg: TrainConfig, step: int) -> float:
    # early on the average would be dominated by the random init
    if not cfg.teacher_warmup:
        return cfg.teacher_decay
    return min(cfg.teacher_decay, 1.0 - 1.0 / (step + 2))


def unsup_ramp(cfg: TrainConfig, step: int, total_steps: int | None) -> float:
    """Sigmoid-shaped ramp exp(-5 (1 - t)^2) over the first ``unsup_ramp_epochs``."""
    if not cfg.unsup_ramp_epochs or not total_steps:
        return 1.0
    ramp = cfg.unsup_ramp_epochs * total_steps / cfg.epochs
    t = min(step / ramp, 1.0)
    return float(math.exp(-5.0 * (1.0 - t) ** 2))


def train_step(models: Models, batch_l: list[SynthBatch], batch_u: list[SynthBatch], cfg: TrainConfig,
               rng_l: np.random.Generator, rng_u: np.random.Generator, step: int,
               total_steps: int | None = None) -> dict:
    """One optimization step; returns the step's scalar record."""
    grads: dict[str, np.ndarray] = {}
    images, gt = _stack([weak_augment(b, rng_l) for b in batch_l])
    probs, _, caches = forward_heads(models.student, images)
    sup, g_sup = supervised_ce(probs, gt)
    backward_heads(models.student, caches, g_sup, None, grads)

    row = {"step": step, "lr": models.optimizer.lr(), "loss_sup": sup, "loss_unsup": 0.0}
    lam = cfg.loss.lambda_unsup * unsup_ramp(cfg, step, total_steps)
    if cfg.mode != "supervised" and batch_u:
        weak_views = [weak_augment(b, rng_u) for b in batch_u]
        strong_views = [strong_extra(b, rng_u) for b in weak_views]
        weak, _ = _stack(weak_views)
        strong, _ = _stack(strong_views)
        if cfg.mode == "mllc":
            row.update(unsup_mllc(models, weak, strong, cfg, rng_u, grads, lam))
        else:
            row.update(unsup_self_training(models, weak, strong, cfg, grads, lam))
    row["unsup_weight"] = lam
    row["loss_total"] = sup + lam * row["loss_unsup"]
    if not math.isfinite(row["loss_total"]):
        raise TrainingDivergenceError(f"non-finite loss at step {step} (seed {cfg.seed}): {row}")

    params = models.student.params()
    full = {name: grads.get(name, np.zeros_like(arr)) for name, arr in params.items()}
    sgd_step(models.optimizer, params, full)
    models.student.bump_versions()
    teacher_update(models.teacher_state, params, teacher_decay(cfg, step))
    models.teacher.bump_versions()
    return row


def predict(net: Network, images: np.ndarray) -> np.ndarray:
    probs, _, _ = forward_heads(net, images)
    return probs.argmax(axis=1)


def pseudo_labels(models: Models, batches: list[SynthBatch], cfg: TrainConfig, group: int) -> np.ndarray:
    """Teacher pseudo-labels for un-augmented images, refined in groups of ``group`` images."""
    out = []
    for start in range(0, len(batches), group):
        images, _ = _stack(batches[start:start + group])
        if cfg.mode == "mllc":
            _, y = teacher_targets(models, images, cfg, seeded_rng(start))
        else:
            y = predict(models.teacher, images)
        out.append(y)
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(models: Models, val: list[SynthBatch], num_classes: int, unlabeled: list[SynthBatch] | None = None,
             cfg: TrainConfig | None = None) -> dict:
    """Validation mIoU of the student head, plus teacher pseudo-label accuracy on ``unlabeled``."""
    if not val:
        raise ValueError("validation split is empty")
    images, gt = _stack(val)
    cm = confusion(predict(models.student, images), gt, num_classes)
    m, per_class = miou(cm)
    rec = {"miou": m, "per_class_iou": [None if np.isnan(v) else float(v) for v in per_class]}
    if unlabeled and cfg is not None:
        y = pseudo_labels(models, unlabeled, cfg, cfg.batch_size // 2)
        rec["pseudo_acc"], _ = pseudo_label_accuracy(y, np.concatenate([b.gt for b in unlabeled]))
    return rec


def split_data(data: list[SynthBatch]):
    labeled = [b for b in data if b.split == "train" and b.is_labeled]
    unlabeled = [b for b in data if b.split == "train" and not b.is_labeled]
    val = [b for b in data if b.split == "val"]
    return labeled, unlabeled, val


def steps_per_epoch(num_unlabeled: int, half: int) -> int:
    return max(1, math.ceil(num_unlabeled / half))


def train(data: list[SynthBatch], cfg: TrainConfig, num_classes: int) -> tuple[Models, TrainRecord]:
    labeled, unlabeled, val = split_data(data)
    if not labeled:
        raise ValueError("no labeled training images")
    half = cfg.batch_size // 2
    per_epoch = steps_per_epoch(len(unlabeled), half)
    total = cfg.epochs * per_epoch
    models = init_models(cfg, labeled[0].images.shape[1], num_classes, total)
    root = seeded_rng(cfg.seed + 1)
    rng_l, rng_u, rng_pick = (np.random.Generator(b) for b in root.bit_generator.spawn(3))
    record = TrainRecord()
    t0 = time.perf_counter()
    step = 0
    for _ in range(cfg.epochs):
        order = rng_pick.permutation(len(unlabeled)) if unlabeled else np.zeros(0, dtype=int)
        for s in range(per_epoch):
            bl = [labeled[i] for i in rng_l.integers(0, len(labeled), size=half)]
            bu = [unlabeled[i] for i in order[s * half:(s + 1) * half]]
            record.steps.append(train_step(models, bl, bu, cfg, rng_l, rng_u, step, total))
            step += 1
            if cfg.eval_interval and step % cfg.eval_interval == 0 and step < total and val:
                record.evals.append({"step": step, **evaluate(models, val, num_classes, unlabeled, cfg)})
    if val:
        record.evals.append({"step": step, **evaluate(models, val, num_classes, unlabeled, cfg)})
    record.wall_clock = time.perf_counter() - t0
    return models, record


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def diagnostics_snapshot() -> dict:
    return diagnostics.snapshot()
