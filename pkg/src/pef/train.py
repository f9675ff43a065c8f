"""AdamW, the step learning-rate schedule and the training loop."""

from __future__ import annotations

import contextlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import autodiff as ad
from .autodiff import Tensor
from .data import AugmentationSpec, KeypointInstance, augment, normalize_image, sample_rng
from .matching import PredictionSet, batch_set_loss, hungarian, match_cost
from .model import Checkpoint, ModelConfig, PoseModel, save_checkpoint
from .skeleton import skeleton_for

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Non-finite loss or a failed numerical check."""


@dataclass
class ScheduleConfig:
    encoder_lr: float = 1e-5
    decoder_lr: float = 1e-4
    drop_factor: float = 10.0
    drop_epoch: int = 50
    epochs: int = 80
    batch_size: int = 42
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 0.0
    checkpoint_every: int = 10

    def validate(self) -> "ScheduleConfig":
        if not 0 <= self.drop_epoch < self.epochs:
            raise ValueError("drop_epoch must lie inside [0, epochs)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.encoder_lr <= 0 or self.decoder_lr <= 0:
            raise ValueError("learning rates must be positive")
        return self


@dataclass
class LossConfig:
    l1_weight: float = 5.0
    eos_coef: float = 0.1
    aux_loss: bool = False


def lr_at(epoch: int, schedule: ScheduleConfig) -> tuple[float, float]:
    """(encoder lr, decoder lr) for a 0-based epoch; both drop once at ``drop_epoch``."""
    if not 0 <= epoch < schedule.epochs:
        raise ValueError(f"epoch {epoch} outside the {schedule.epochs}-epoch schedule")
    factor = schedule.drop_factor if epoch >= schedule.drop_epoch else 1.0
    return schedule.encoder_lr / factor, schedule.decoder_lr / factor


# --- optimizer ------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kw) -> "OptimizerState":
        return cls([np.zeros_like(p.data) for p in params],
                   [np.zeros_like(p.data) for p in params], **kw)


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None],
               state: OptimizerState, lr: float, advance: bool = True) -> None:
    """One AdamW update in place: decoupled decay, then bias-corrected Adam step.

    ``advance=False`` reuses the current step count, so several parameter
    groups with different learning rates can share one optimizer step.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    if advance:
        state.step += 1
    t = state.step
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ValueError(f"gradient/moment shape mismatch for parameter {i}")
        if state.weight_decay:
            p.data -= p.data.dtype.type(lr * state.weight_decay) * p.data
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)


class AdamW:
    """AdamW over named parameter groups sharing one step counter."""

    def __init__(self, groups: dict[str, list[tuple[str, Tensor]]], weight_decay=1e-4,
                 betas=(0.9, 0.999), eps=1e-8):
        self.groups = groups
        self.names = [n for g in groups.values() for n, _ in g]
        self.params = [p for g in groups.values() for _, p in g]
        self.state = OptimizerState.for_params(self.params, weight_decay=weight_decay,
                                               betas=tuple(betas), eps=eps)
        self._slices = {}
        start = 0
        for name, g in groups.items():
            self._slices[name] = slice(start, start + len(g))
            start += len(g)

    def step(self, lrs: dict[str, float]) -> None:
        self.state.step += 1
        for name, sl in self._slices.items():
            sub = OptimizerState(self.state.m[sl], self.state.v[sl], self.state.step,
                                 self.state.weight_decay, self.state.betas, self.state.eps)
            params = self.params[sl]
            adamw_step(params, [p.grad for p in params], sub, lrs[name], advance=False)
            self.state.m[sl] = sub.m
            self.state.v[sl] = sub.v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"step": np.array([self.state.step], dtype=np.int64)}
        for name, m, v in zip(self.names, self.state.m, self.state.v):
            out[f"m.{name}"] = m
            out[f"v.{name}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.state.step = int(arrays["step"][0])
        for i, name in enumerate(self.names):
            self.state.m[i] = arrays[f"m.{name}"].astype(self.params[i].dtype)
            self.state.v[i] = arrays[f"v.{name}"].astype(self.params[i].dtype)


def clip_gradients(params: Sequence[Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum())
                          for p in params if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return total


# --- training loop ----------------------------------------------------------------

@dataclass
class LossRecord:
    epoch: int
    step: int
    total: float
    class_term: float
    coord_term: float

    def line(self) -> str:
        return f"{self.epoch},{self.step},{self.total!r},{self.class_term!r},{self.coord_term!r}"


LOSS_LOG_HEADER = "epoch,step,total,class,coord"


@dataclass
class TrainResult:
    model: PoseModel
    checkpoint: Checkpoint
    losses: list[LossRecord] = field(default_factory=list)


@contextlib.contextmanager
def thread_limit(jobs: int | None):
    """Cap BLAS worker threads (``jobs=1`` plus fixed seeds gives bit-identical runs)."""
    if not jobs:
        yield
        return
    with threadpool_limits(limits=jobs):
        yield


def _prepare(samples):
    out = []
    for image, inst in samples:
        img = normalize_image(image) if np.asarray(image).dtype == np.uint8 else np.asarray(image, dtype=np.float64)
        out.append((img, inst))
    return out


def compute_loss(model: PoseModel, images: np.ndarray, instances: Sequence[KeypointInstance],
                 loss_cfg: LossConfig):
    """Forward, match each sample, and return the batch set loss breakdown."""
    if loss_cfg.aux_loss:
        outputs = model.decode_all(*model.encode(images))
    else:
        outputs = [model(images)]
    total = class_sum = coord_sum = None
    for logits, coords in outputs:
        if not (np.isfinite(logits.data).all() and np.isfinite(coords.data).all()):
            raise NumericError("non-finite model output")
        assignments = []
        for s, inst in enumerate(instances):
            pred = PredictionSet(logits.data[s].astype(np.float64), coords.data[s].astype(np.float64))
            assignments.append(hungarian(match_cost(pred, inst, loss_cfg.l1_weight)))
        parts = batch_set_loss(logits, coords, instances, assignments,
                               loss_cfg.l1_weight, loss_cfg.eos_coef)
        if total is None:
            total, class_sum, coord_sum = parts.total, parts.class_term, parts.coord_term
        else:
            total = ad.add(total, parts.total)
            class_sum = ad.add(class_sum, parts.class_term)
            coord_sum = ad.add(coord_sum, parts.coord_term)
    return total, class_sum, coord_sum


def train(samples, model_config: ModelConfig, schedule: ScheduleConfig,
          loss_cfg: LossConfig | None = None, augmentation: AugmentationSpec | None = None,
          seed: int = 0, dtype=np.float32, out_dir=None, jobs: int | None = None,
          log_every: int = 0) -> TrainResult:
    """Train from random initialization on ``(image, instance)`` samples.

    Images are uint8 crops (standardized here) or already standardized floats,
    at the model's input size; instances carry crop-normalized coordinates.
    The loss log is written to ``out_dir/loss_log.csv`` and a checkpoint to
    ``out_dir/checkpoint.pef`` at the end and every ``checkpoint_every`` epochs.
    """
    loss_cfg = loss_cfg or LossConfig()
    schedule.validate()
    data = _prepare(samples)
    if not data:
        raise ValueError("empty training set")
    model = PoseModel(model_config, dtype=dtype)
    optim = AdamW(model.parameter_groups(), schedule.weight_decay,
                  (schedule.beta1, schedule.beta2), schedule.eps)
    flip_map = skeleton_for(model_config.num_joints).flip_map
    out_dir = Path(out_dir) if out_dir else None
    log_fh = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "loss_log.csv", "w")
        log_fh.write(LOSS_LOG_HEADER + "\n")
    records: list[LossRecord] = []
    step = 0
    try:
        with thread_limit(jobs), ad.precision(dtype):
            for epoch in range(schedule.epochs):
                enc_lr, dec_lr = lr_at(epoch, schedule)
                order = np.random.default_rng(np.random.SeedSequence([seed, epoch, 1 << 30])).permutation(len(data))
                for start in range(0, len(order), schedule.batch_size):
                    idx = order[start:start + schedule.batch_size]
                    images, instances = [], []
                    for i in idx:
                        img, inst = data[i]
                        if augmentation is not None:
                            img, inst = augment(img, inst, augmentation, sample_rng(seed, epoch, int(i)), flip_map)
                        images.append(img)
                        instances.append(inst)
                    batch = np.stack(images).astype(dtype)
                    try:
                        total, cls_term, coord_term = compute_loss(model, batch, instances, loss_cfg)
                    except NumericError as exc:
                        raise NumericError(f"{exc} at epoch {epoch} step {step} "
                                           f"(samples {idx.tolist()})") from None
                    values = (total.item(), cls_term.item(), coord_term.item())
                    if not all(math.isfinite(v) for v in values):
                        raise NumericError(f"non-finite loss at epoch {epoch} step {step} "
                                           f"(total={values[0]}, class={values[1]}, coord={values[2]})")
                    optim.zero_grad()
                    ad.backward(total)
                    if schedule.grad_clip > 0:
                        clip_gradients(optim.params, schedule.grad_clip)
                    optim.step({"encoder": enc_lr, "decoder": dec_lr})
                    rec = LossRecord(epoch, step, *values)
                    records.append(rec)
                    if log_fh:
                        log_fh.write(rec.line() + "\n")
                    if log_every and step % log_every == 0:
                        log.info("epoch %d step %d loss %.4f (class %.4f coord %.4f)",
                                 epoch, step, *values)
                    step += 1
                if out_dir and schedule.checkpoint_every and (epoch + 1) % schedule.checkpoint_every == 0:
                    save_checkpoint(out_dir / "checkpoint.pef",
                                    Checkpoint.from_model(model, optim, epoch + 1))
    finally:
        if log_fh:
            log_fh.close()
    checkpoint = Checkpoint.from_model(model, optim, schedule.epochs)
    if out_dir:
        save_checkpoint(out_dir / "checkpoint.pef", checkpoint)
    return TrainResult(model, checkpoint, records)


def read_loss_log(path) -> list[LossRecord]:
    lines = Path(path).read_text().splitlines()
    out = []
    for line in lines[1:]:
        e, s, t, c, k = line.split(",")
        out.append(LossRecord(int(e), int(s), float(t), float(c), float(k)))
    return out
