"""Three-stage linearization pipeline, optimizer, and schedules.

Stage 1 aligns each student linear-attention block to the teacher's softmax
block outputs, feeding every student block the teacher's own post-ln1
activations so per-block errors cannot accumulate.  Stage 2 aligns final-norm
token features end to end.  Stage 3 is supervised fine-tuning with the head
at full learning rate and the backbone at a fraction of it.

Default hyperparameters (exposed by the stage*_defaults constructors):

    stage 1: 4 epochs, batch 32, lr 1e-2, fixed schedule
    stage 2: 30 epochs, batch 16, lr 1e-3, polynomial decay (power 0.9)
    stage 3: 10 epochs, batch 8,  lr 1e-4, polynomial decay, backbone at 0.1x
    weight decay 0.05 everywhere, AdamW

Everything is deterministic given (seed, config): batch order comes from the
seeded Philox stream and gradient accumulation order is fixed by the tensor
engine, so repeated runs log identical losses.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import attend
from .data import Sample, augment, stack
from .model import ViTModel, forward, logits_from_features
from .tensor import ContractError, ShapeError, Tensor

log = logging.getLogger(__name__)

SCHEDULES = ("fixed", "polynomial", "linear")


@dataclass
class StageConfig:
    stage: int
    epochs: int
    batch_size: int
    lr: float
    weight_decay: float = 0.05
    schedule: str = "fixed"
    poly_power: float = 0.9
    lam: float = 1.0  # stage 2 loss scale
    backbone_lr_ratio: float = 0.1  # stage 3
    seed: int = 0
    early_stop_patience: int = 0  # stage 2; 0 disables early stopping
    val_fraction: float = 0.1
    layer_mean: bool = False  # average the stage-1 loss over layers instead of summing
    tune_output_proj: bool = False  # include W_O in the stage-1 trainable set
    maps_only: bool = False  # hedgehog: stage 1 trains only the feature maps

    def __post_init__(self) -> None:
        if self.stage not in (1, 2, 3):
            raise ContractError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractError(f"bad epochs/batch_size: {self.epochs}/{self.batch_size}")
        if self.lr <= 0:
            raise ContractError(f"lr must be positive, got {self.lr}")
        if self.schedule not in SCHEDULES:
            raise ContractError(f"unknown schedule {self.schedule!r}, expected one of {SCHEDULES}")
        if self.stage == 2 and self.lam <= 0:
            raise ContractError(f"stage-2 lambda must be positive, got {self.lam}")
        if self.stage == 3 and not 0.0 < self.backbone_lr_ratio <= 1.0:
            raise ContractError(f"backbone_lr_ratio must be in (0, 1], got {self.backbone_lr_ratio}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ContractError(f"val_fraction must be in (0, 1), got {self.val_fraction}")


def stage1_defaults(**overrides) -> StageConfig:
    base = dict(stage=1, epochs=4, batch_size=32, lr=1e-2, schedule="fixed")
    base.update(overrides)
    return StageConfig(**base)


def stage2_defaults(**overrides) -> StageConfig:
    base = dict(stage=2, epochs=30, batch_size=16, lr=1e-3, schedule="polynomial", lam=5.0,
                early_stop_patience=3)
    base.update(overrides)
    return StageConfig(**base)


def stage3_defaults(**overrides) -> StageConfig:
    base = dict(stage=3, epochs=10, batch_size=8, lr=1e-4, schedule="polynomial")
    base.update(overrides)
    return StageConfig(**base)


# ---------------------------------------------------------------------------
# optimizer and schedule


@dataclass
class OptimState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_optim_state(params: list[Tensor]) -> OptimState:
    return OptimState(m=[np.zeros_like(p.data) for p in params],
                      v=[np.zeros_like(p.data) for p in params])


def adamw_step(params: list[Tensor], grads: list[np.ndarray | None], state: OptimState,
               lr: float, wd: float) -> None:
    """Decoupled weight decay applied before the bias-corrected Adam update.

    A None gradient counts as zero: the parameter still decays but receives
    no Adam movement.
    """
    if len(params) != len(grads):
        raise ContractError(f"{len(params)} params but {len(grads)} grads")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        new = p.data * (1.0 - lr * wd) if wd else p.data
        if g is not None:
            if g.shape != p.data.shape:
                raise ShapeError(f"grad shape {g.shape} does not match param {p.data.shape}")
            state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
            state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
            new = new - lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
        elif wd:
            new = new.copy()
        p.data = new
        p.grad = None


def lr_at(step: int, total: int, cfg: StageConfig) -> float:
    if total < 1:
        raise ContractError(f"total steps must be >= 1, got {total}")
    if not 0 <= step <= total:
        raise ContractError(f"step {step} outside [0, {total}]")
    if cfg.schedule == "fixed":
        return cfg.lr
    frac = 1.0 - step / total
    if cfg.schedule == "polynomial":
        return cfg.lr * frac ** cfg.poly_power
    return cfg.lr * frac


# ---------------------------------------------------------------------------
# logging


@dataclass
class TrainLog:
    steps: list[tuple[int, int, float, float]] = field(default_factory=list)  # step, stage, lr, loss
    epochs: list[tuple[int, float, float]] = field(default_factory=list)  # epoch, train loss, val loss (nan if none)

    def log_step(self, step: int, stage: int, lr: float, loss: float) -> None:
        self.steps.append((step, stage, lr, loss))

    def log_epoch(self, epoch: int, train_loss: float, val_loss: float = math.nan) -> None:
        self.epochs.append((epoch, train_loss, val_loss))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "stage", "lr", "loss"])
            for step, stage, lr, loss in self.steps:
                w.writerow([step, stage, f"{lr:.10g}", f"{loss:.10g}"])

    def epochs_to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss"])
            for epoch, tr, va in self.epochs:
                w.writerow([epoch, f"{tr:.10g}", "" if math.isnan(va) else f"{va:.10g}"])


# ---------------------------------------------------------------------------
# losses


def attention_align_loss(taps_teacher: list[tuple[Tensor, Tensor]], outs_student: list[Tensor],
                         layer_mean: bool = False) -> Tensor:
    """Sum over blocks of the per-block elementwise MSE between attention outputs.

    The per-block term is the mean over all output elements; the block terms
    are summed, not averaged (layer_mean=True switches to the average).
    """
    if len(taps_teacher) != len(outs_student):
        raise ContractError(f"{len(taps_teacher)} teacher taps vs {len(outs_student)} student outputs")
    if not taps_teacher:
        raise ContractError("no layers to align")
    total = None
    for (_, o_t), o_s in zip(taps_teacher, outs_student):
        if o_t.shape != o_s.shape:
            raise ShapeError(f"attention output shapes disagree: {o_t.shape} vs {o_s.shape}")
        diff = T.sub(o_s, o_t)
        term = T.mean_all(T.mul(diff, diff))
        total = term if total is None else T.add(total, term)
    if layer_mean:
        total = T.mul_scalar(total, 1.0 / len(taps_teacher))
    return total


def feature_align_loss(f_teacher: Tensor, f_student: Tensor, lam: float) -> Tensor:
    """lam * mean squared difference over all token features (CLS included)."""
    if f_teacher.shape != f_student.shape:
        raise ShapeError(f"feature shapes disagree: {f_teacher.shape} vs {f_student.shape}")
    diff = T.sub(f_student, f_teacher)
    return T.mul_scalar(T.mean_all(T.mul(diff, diff)), lam)


# ---------------------------------------------------------------------------
# shared loop machinery


def _batches(n: int, batch_size: int, rng: T.Rng):
    perm = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield perm[lo:lo + batch_size]


def _check_same_architecture(teacher: ViTModel, student: ViTModel) -> None:
    tc, sc = teacher.config, student.config
    same = (tc.image_size == sc.image_size and tc.patch_size == sc.patch_size
            and tc.depth == sc.depth and tc.d_model == sc.d_model
            and tc.use_cls_token == sc.use_cls_token)
    if not same:
        raise ContractError("student was not derived from this teacher (architecture mismatch)")


def _set_trainable(model: ViTModel, trainable: set[int]) -> None:
    for _, t in model.named_tensors():
        t.requires_grad = id(t) in trainable


def _all_trainable(model: ViTModel) -> None:
    for name, t in model.named_tensors():
        t.requires_grad = not name.endswith(".omega")


def _grads(params: list[Tensor]) -> list[np.ndarray | None]:
    return [p.grad for p in params]


def _stage1_trainables(student: ViTModel, cfg: StageConfig) -> list[Tensor]:
    params: list[Tensor] = []
    for blk in student.blocks:
        if not cfg.maps_only:
            params.extend(blk.attn.projection_tensors())
            if cfg.tune_output_proj:
                params.append(blk.attn.w_o)
        if student.config.attention.variant == "hedgehog":
            params.extend(blk.attn.extras["maps"])
    if not params:
        raise ContractError("stage-1 trainable set is empty (maps_only without hedgehog maps?)")
    return params


def _stage2_trainables(student: ViTModel) -> list[Tensor]:
    # everything feeding the feature output; the head plays no role in stage 2
    return [t for name, t in student.named_tensors()
            if name != "head" and not name.endswith(".omega")]


# ---------------------------------------------------------------------------
# stages


def stage1_attention_align(teacher: ViTModel, student: ViTModel, data: list[Sample],
                           cfg: StageConfig) -> tuple[ViTModel, TrainLog]:
    if cfg.stage != 1:
        raise ContractError(f"stage1_attention_align got a stage-{cfg.stage} config")
    if teacher.config.attention.variant != "softmax":
        raise ContractError("stage 1 teacher must use softmax attention")
    if student.config.attention.variant == "softmax":
        raise ContractError("stage 1 student must use a linear variant")
    _check_same_architecture(teacher, student)
    images, _ = stack(data)

    params = _stage1_trainables(student, cfg)
    _set_trainable(student, {id(p) for p in params})
    state = init_optim_state(params)
    logrec = TrainLog()
    rng = T.Rng(cfg.seed)
    steps_per_epoch = math.ceil(len(data) / cfg.batch_size)
    total = max(1, cfg.epochs * steps_per_epoch)
    spec = student.config.attention
    step = 0
    try:
        for epoch in range(cfg.epochs):
            epoch_losses = []
            for idx in _batches(len(data), cfg.batch_size, rng):
                with T.no_grad():
                    _, taps = forward(teacher, images[idx], "tap_attention_io")
                outs = [attend(x_i, blk.attn, spec) for (x_i, _), blk in zip(taps, student.blocks)]
                loss = attention_align_loss(taps, outs, cfg.layer_mean)
                loss.backward()
                lr = lr_at(step, total, cfg)
                adamw_step(params, _grads(params), state, lr, cfg.weight_decay)
                logrec.log_step(step, 1, lr, loss.item())
                epoch_losses.append(loss.item())
                step += 1
            logrec.log_epoch(epoch, float(np.mean(epoch_losses)))
            log.info("stage1 epoch %d/%d loss %.6f", epoch + 1, cfg.epochs, logrec.epochs[-1][1])
    finally:
        _all_trainable(student)
    return student, logrec


def stage1_loss_eval(teacher: ViTModel, student: ViTModel, data: list[Sample],
                     cfg: StageConfig, max_batches: int | None = None) -> float:
    """Mean stage-1 loss over the dataset without updating anything."""
    images, _ = stack(data)
    spec = student.config.attention
    losses = []
    with T.no_grad():
        for bi, lo in enumerate(range(0, len(data), cfg.batch_size)):
            if max_batches is not None and bi >= max_batches:
                break
            _, taps = forward(teacher, images[lo:lo + cfg.batch_size], "tap_attention_io")
            outs = [attend(x_i, blk.attn, spec) for (x_i, _), blk in zip(taps, student.blocks)]
            losses.append(attention_align_loss(taps, outs, cfg.layer_mean).item())
    return float(np.mean(losses))


def stage2_feature_align(teacher: ViTModel, student: ViTModel, data: list[Sample],
                         cfg: StageConfig) -> tuple[ViTModel, TrainLog]:
    if cfg.stage != 2:
        raise ContractError(f"stage2_feature_align got a stage-{cfg.stage} config")
    _check_same_architecture(teacher, student)
    images, _ = stack(data)
    n = len(data)

    if cfg.early_stop_patience > 0:
        perm = T.Rng(cfg.seed).permutation(n)
        n_val = max(1, int(round(cfg.val_fraction * n)))
        val_idx, train_idx = perm[:n_val], perm[n_val:]
    else:
        val_idx, train_idx = np.array([], dtype=np.int64), np.arange(n)

    params = _stage2_trainables(student)
    _set_trainable(student, {id(p) for p in params})
    state = init_optim_state(params)
    logrec = TrainLog()
    rng = T.Rng(cfg.seed + 1)
    steps_per_epoch = math.ceil(len(train_idx) / cfg.batch_size)
    total = max(1, cfg.epochs * steps_per_epoch)
    step = 0
    best_val = math.inf
    best_weights: dict[str, np.ndarray] | None = None
    stale = 0
    try:
        for epoch in range(cfg.epochs):
            epoch_losses = []
            for sub in _batches(len(train_idx), cfg.batch_size, rng):
                idx = train_idx[sub]
                with T.no_grad():
                    f_t = forward(teacher, images[idx], "features")
                f_s = forward(student, images[idx], "features")
                loss = feature_align_loss(f_t, f_s, cfg.lam)
                loss.backward()
                lr = lr_at(step, total, cfg)
                adamw_step(params, _grads(params), state, lr, cfg.weight_decay)
                logrec.log_step(step, 2, lr, loss.item())
                epoch_losses.append(loss.item())
                step += 1
            val_loss = math.nan
            if len(val_idx):
                val_loss = _stage2_eval(teacher, student, images[val_idx], cfg)
                if val_loss < best_val:
                    best_val = val_loss
                    best_weights = {name: t.data.copy() for name, t in student.named_tensors()}
                    stale = 0
                else:
                    stale += 1
            logrec.log_epoch(epoch, float(np.mean(epoch_losses)), val_loss)
            log.info("stage2 epoch %d/%d train %.6f val %s", epoch + 1, cfg.epochs,
                     logrec.epochs[-1][1], "n/a" if math.isnan(val_loss) else f"{val_loss:.6f}")
            if cfg.early_stop_patience > 0 and stale >= cfg.early_stop_patience:
                log.info("stage2 early stop after epoch %d (no val improvement for %d epochs)",
                         epoch + 1, stale)
                break
        if best_weights is not None:
            for name, t in student.named_tensors():
                t.data = best_weights[name]
                t.grad = None
    finally:
        _all_trainable(student)
    return student, logrec


def _stage2_eval(teacher: ViTModel, student: ViTModel, images: np.ndarray, cfg: StageConfig) -> float:
    losses = []
    with T.no_grad():
        for lo in range(0, len(images), cfg.batch_size):
            chunk = images[lo:lo + cfg.batch_size]
            f_t = forward(teacher, chunk, "features")
            f_s = forward(student, chunk, "features")
            losses.append(feature_align_loss(f_t, f_s, cfg.lam).item())
    return float(np.mean(losses))


def stage2_loss_eval(teacher: ViTModel, student: ViTModel, data: list[Sample], cfg: StageConfig) -> float:
    images, _ = stack(data)
    return _stage2_eval(teacher, student, images, cfg)


def stage3_sft(student: ViTModel, data: list[Sample], cfg: StageConfig,
               augment_cfg: tuple[int, float] | None = None) -> tuple[ViTModel, TrainLog]:
    """Supervised fine-tuning: head at cfg.lr, backbone at backbone_lr_ratio * cfg.lr.

    Attaches a fresh linear head when the model has none.  Also serves as the
    teacher pre-training loop (backbone_lr_ratio=1.0 on a fresh model).
    """
    if cfg.stage != 3:
        raise ContractError(f"stage3_sft got a stage-{cfg.stage} config")
    if not data:
        raise ContractError("stage 3 needs labeled data")
    images, labels = stack(data)
    c = student.config.num_classes
    if labels.min() < 0 or labels.max() >= c:
        raise ContractError(f"labels outside [0, {c}): range [{labels.min()}, {labels.max()}]")
    if student.head is None:
        hrng = T.Rng(cfg.seed + 17)
        student.head = T.param(hrng.normal((student.config.d_model, c), std=0.02))

    head_params = [student.head]
    backbone_params = [t for name, t in student.named_tensors()
                       if name != "head" and not name.endswith(".omega")]
    _set_trainable(student, {id(t) for t in head_params + backbone_params})
    head_state = init_optim_state(head_params)
    back_state = init_optim_state(backbone_params)
    logrec = TrainLog()
    rng = T.Rng(cfg.seed + 2)
    aug_rng = T.Rng(cfg.seed + 3)
    steps_per_epoch = math.ceil(len(data) / cfg.batch_size)
    total = max(1, cfg.epochs * steps_per_epoch)
    step = 0
    try:
        for epoch in range(cfg.epochs):
            epoch_losses = []
            for idx in _batches(len(data), cfg.batch_size, rng):
                batch = images[idx]
                if augment_cfg is not None:
                    pad, jitter = augment_cfg
                    batch = np.stack([augment(img, aug_rng, pad, jitter) for img in batch])
                logits = forward(student, batch, "logits")
                loss = T.cross_entropy(logits, labels[idx])
                loss.backward()
                lr = lr_at(step, total, cfg)
                adamw_step(head_params, _grads(head_params), head_state, lr, cfg.weight_decay)
                adamw_step(backbone_params, _grads(backbone_params), back_state,
                           lr * cfg.backbone_lr_ratio, cfg.weight_decay)
                logrec.log_step(step, 3, lr, loss.item())
                epoch_losses.append(loss.item())
                step += 1
            logrec.log_epoch(epoch, float(np.mean(epoch_losses)))
            log.info("stage3 epoch %d/%d loss %.6f", epoch + 1, cfg.epochs, logrec.epochs[-1][1])
    finally:
        _all_trainable(student)
    return student, logrec


def evaluate(model: ViTModel, data: list[Sample], batch_size: int = 64) -> float:
    """Top-1 accuracy; argmax ties resolve to the lowest class index."""
    if not data:
        raise ContractError("cannot evaluate on an empty dataset")
    images, labels = stack(data)
    correct = 0
    with T.no_grad():
        for lo in range(0, len(data), batch_size):
            feats = forward(model, images[lo:lo + batch_size], "features")
            logits = logits_from_features(model, feats)
            correct += int((logits.data.argmax(axis=1) == labels[lo:lo + batch_size]).sum())
    return correct / len(data)
