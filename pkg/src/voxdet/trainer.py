"""Two-phase training: reference branch first, then the guided live branch.

Phase one fits the reference branch end-to-end on composed scenes.  Phase
two freezes it and trains the live branch on paired (real, composed)
scenes, adding the feature-association term to the detection losses.
Every random choice (shuffles, augmentation draws, init) derives from the
run seed, so reruns are bit-identical.
"""

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import engine
from .adaptation import (
    COUNT_FOREGROUND,
    association_loss,
    foreground_mask,
    offset_length_map,
    reweighting_map,
)
from .detection_head import (
    CONVENTION_PRINTED,
    assign_targets,
    associate_total_loss,
    cfg_total_loss,
    flatten_cls_map,
    flatten_reg_map,
    focal_loss,
    generate_anchors,
    smooth_l1_loss,
)
from .engine import Tape, Tensor, save_checkpoint
from .geometry import Box3D, PointCloud, rotation_z
from .network import (
    SPATIAL_DOWNSAMPLE,
    NetworkConfig,
    cfg_forward,
    copy_shared_into,
    init_params,
    pfe_forward,
    validate_params,
)

_PHASE_CFG = 1
_PHASE_PAIR = 2


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 6
    epochs: int = 80
    base_lr: float = 0.001
    sigma: float = 0.5
    seed: int = 0
    augment: bool = True
    clip_norm: float | None = 10.0
    count_mode: str = COUNT_FOREGROUND
    codec: str = CONVENTION_PRINTED
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive or None")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")


@dataclass(frozen=True)
class ScenePair:
    """A real scene and its composed twin sharing one annotation list."""

    real: PointCloud
    conceptual: PointCloud
    boxes: tuple[Box3D, ...]

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    bbox: float
    cls: float
    assoc: float
    total: float


def format_loss_log(log: Sequence[EpochStats]) -> str:
    lines = ["epoch bbox cls assoc total"]
    for row in log:
        lines.append(" ".join([str(row.epoch)] + [
            repr(float(v)) for v in (row.bbox, row.cls, row.assoc, row.total)]))
    return "\n".join(lines) + "\n"


def cosine_lr(step: int, total_steps: int, base: float) -> float:
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


class Adam:
    """Adaptive-moment optimizer: decay 0.9/0.999, eps 1e-8, no weight decay."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        for name in sorted(self.params):
            p = self.params[name]
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / bias1
            v_hat = self.v[name] / bias2
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


# --- global augmentation -----------------------------------------------------

def apply_global_transform(cloud: PointCloud, boxes: Sequence[Box3D],
                           angle: float, scale: float, flip: bool):
    """Mirror across the x axis (optional), rotate about z, scale uniformly.

    The same transform maps boxes and their interior points consistently:
    the mirror negates y and yaw, rotation adds to yaw, scale multiplies
    centers and dims alike.
    """
    xyz = cloud.xyz.copy()
    if flip:
        xyz[:, 1] = -xyz[:, 1]
    xyz = (xyz @ rotation_z(angle).T) * scale
    out_cloud = PointCloud.from_xyz(xyz, cloud.intensity.copy())

    out_boxes = []
    for b in boxes:
        cy, yaw = (-b.cy, -b.yaw) if flip else (b.cy, b.yaw)
        c, s = math.cos(angle), math.sin(angle)
        rx = c * b.cx - s * cy
        ry = s * b.cx + c * cy
        out_boxes.append(Box3D(rx * scale, ry * scale, b.cz * scale,
                               b.l * scale, b.w * scale, b.h * scale,
                               yaw + angle))
    return out_cloud, out_boxes


def draw_transform(rng) -> tuple[float, float, bool]:
    angle = rng.uniform(-math.pi / 4, math.pi / 4)
    scale = rng.uniform(0.95, 1.05)
    flip = bool(rng.uniform() < 0.5)
    return angle, scale, flip


def augment_pair(pair: ScenePair, seed) -> ScenePair:
    """One shared transform draw applied to both scenes of the pair."""
    angle, scale, flip = draw_transform(np.random.default_rng(seed))
    real, boxes = apply_global_transform(pair.real, pair.boxes, angle, scale, flip)
    conceptual, _ = apply_global_transform(pair.conceptual, pair.boxes,
                                           angle, scale, flip)
    return ScenePair(real, conceptual, tuple(boxes))


# --- training phases ---------------------------------------------------------

def _detection_losses(out, boxes, anchors, codec):
    assignment = assign_targets(anchors, list(boxes), convention=codec)
    cls = focal_loss(flatten_cls_map(out.cls_map), assignment.labels)
    bbox = smooth_l1_loss(flatten_reg_map(out.reg_map), assignment)
    return bbox, cls


def _require_finite(epoch, step, **parts):
    bad = {k: v for k, v in parts.items() if not math.isfinite(v)}
    if bad:
        detail = ", ".join(f"{k}={v}" for k, v in sorted(bad.items()))
        raise RuntimeError(
            f"non-finite loss at epoch {epoch}, step {step}: {detail}")


def _batches(order: np.ndarray, size: int):
    for start in range(0, len(order), size):
        yield order[start:start + size]


def _maybe_checkpoint(params, directory, prefix, epoch, every):
    if directory is None or not every or epoch % every:
        return
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_checkpoint(directory / f"{prefix}_epoch{epoch:04d}.ckpt", params)


def train_cfg(scenes: Sequence[tuple[PointCloud, Sequence[Box3D]]],
              net_config: NetworkConfig, train_config: TrainConfig,
              checkpoint_dir=None) -> tuple[dict[str, Tensor], list[EpochStats]]:
    """Fit the reference branch on composed scenes with the plain two-part loss."""
    scenes = list(scenes)
    if not scenes:
        raise ValueError("dataset is empty")
    params = init_params(net_config, seed=train_config.seed, with_offsets=False)
    opt = Adam(params)
    anchors = generate_anchors(net_config.bev_shape, net_config.grid)
    batches_per_epoch = math.ceil(len(scenes) / train_config.batch_size)
    total_steps = train_config.epochs * batches_per_epoch

    log: list[EpochStats] = []
    step = 0
    for epoch in range(1, train_config.epochs + 1):
        order = np.random.default_rng([train_config.seed, epoch]).permutation(len(scenes))
        sums = np.zeros(3)  # bbox, cls, total
        for batch in _batches(order, train_config.batch_size):
            lr = cosine_lr(step, total_steps, train_config.base_lr)
            with Tape() as tape:
                batch_loss = None
                for idx in batch:
                    cloud, boxes = scenes[idx]
                    if train_config.augment:
                        rng = np.random.default_rng(
                            [train_config.seed, _PHASE_CFG, epoch, int(idx)])
                        cloud, boxes = apply_global_transform(
                            cloud, boxes, *draw_transform(rng))
                    out = cfg_forward(cloud, params, net_config)
                    bbox, cls = _detection_losses(out, boxes, anchors,
                                                  train_config.codec)
                    total = cfg_total_loss(bbox, cls)
                    _require_finite(epoch, step, bbox=bbox.item(), cls=cls.item())
                    sums += (bbox.item(), cls.item(), total.item())
                    batch_loss = total if batch_loss is None else engine.add(batch_loss, total)
                batch_loss = engine.mul(batch_loss, Tensor(np.float64(1.0 / len(batch))))
                tape.backward(batch_loss)
            if train_config.clip_norm is not None:
                clip_gradients(params, train_config.clip_norm)
            opt.step(lr)
            opt.zero_grad()
            step += 1
        means = sums / len(scenes)
        log.append(EpochStats(epoch, means[0], means[1], 0.0, means[2]))
        _maybe_checkpoint(params, checkpoint_dir, "cfg", epoch,
                          train_config.checkpoint_every)
    return params, log


def train_associate(pairs: Sequence[ScenePair], cfg_params: dict[str, Tensor],
                    net_config: NetworkConfig, train_config: TrainConfig,
                    checkpoint_dir=None) -> tuple[dict[str, Tensor], list[EpochStats]]:
    """Train the live branch against the frozen reference on scene pairs.

    Per pair: the reference branch consumes the composed scene without
    gradients; the live branch consumes the real scene; the total loss adds
    the reweighted feature-association term with weight sigma.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("dataset is empty")
    frozen = {name: Tensor(np.array(t.data, copy=True)) for name, t in cfg_params.items()}
    validate_params(frozen, net_config, with_offsets=False)

    params = init_params(net_config, seed=train_config.seed, with_offsets=True)
    copy_shared_into(params, frozen)  # live trunk starts from reference weights
    opt = Adam(params)
    anchors = generate_anchors(net_config.bev_shape, net_config.grid)
    batches_per_epoch = math.ceil(len(pairs) / train_config.batch_size)
    total_steps = train_config.epochs * batches_per_epoch

    log: list[EpochStats] = []
    step = 0
    for epoch in range(1, train_config.epochs + 1):
        order = np.random.default_rng([train_config.seed, epoch]).permutation(len(pairs))
        sums = np.zeros(4)  # bbox, cls, assoc, total
        for batch in _batches(order, train_config.batch_size):
            lr = cosine_lr(step, total_steps, train_config.base_lr)
            staged = []
            for idx in batch:
                pair = pairs[idx]
                if train_config.augment:
                    pair = augment_pair(pair, [train_config.seed, _PHASE_PAIR,
                                               epoch, int(idx)])
                # reference features and foreground come from the composed
                # scene, outside any tape
                ref_out = cfg_forward(pair.conceptual, frozen, net_config)
                fg = foreground_mask(pair.boxes, pair.conceptual, net_config.grid,
                                     SPATIAL_DOWNSAMPLE)
                staged.append((pair, ref_out, fg))

            with Tape() as tape:
                batch_loss = None
                for pair, ref_out, fg in staged:
                    out = pfe_forward(pair.real, params, net_config)
                    bbox, cls = _detection_losses(out, pair.boxes, anchors,
                                                  train_config.codec)
                    reweight = reweighting_map(offset_length_map(out.offsets), fg)
                    assoc = association_loss(out.adapt_feature, ref_out.adapt_feature,
                                             reweight, train_config.count_mode)
                    total = associate_total_loss(bbox, cls, assoc, train_config.sigma)
                    _require_finite(epoch, step, bbox=bbox.item(), cls=cls.item(),
                                    assoc=assoc.item())
                    sums += (bbox.item(), cls.item(), assoc.item(), total.item())
                    batch_loss = total if batch_loss is None else engine.add(batch_loss, total)
                batch_loss = engine.mul(batch_loss, Tensor(np.float64(1.0 / len(staged))))
                tape.backward(batch_loss)
            if train_config.clip_norm is not None:
                clip_gradients(params, train_config.clip_norm)
            opt.step(lr)
            opt.zero_grad()
            step += 1
        means = sums / len(pairs)
        log.append(EpochStats(epoch, means[0], means[1], means[2], means[3]))
        _maybe_checkpoint(params, checkpoint_dir, "pfe", epoch,
                          train_config.checkpoint_every)
    return params, log
