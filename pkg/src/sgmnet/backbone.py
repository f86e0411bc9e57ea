"""Conv-5 feature extractor, pre-training heads and base-class pre-training."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from . import optim
from . import tensor as T
from .nn import ConvBlock, Linear, Module, set_trainable
from .optim import OptimizerState
from .tensor import DimensionError, Tensor, no_grad

log = logging.getLogger(__name__)

CHANNELS = (64, 64, 128, 128, 256)
INPUT_SHAPE = (3, 64, 64)


class DataError(ValueError):
    pass


class Conv5Backbone(Module):
    """Five conv blocks; the first four are followed by 2×2 max-pooling."""

    def __init__(self, rng: np.random.Generator, channels=CHANNELS, in_channels: int = 3):
        if len(channels) != 5:
            raise ValueError("Conv-5 needs exactly five channel widths")
        widths = (in_channels,) + tuple(channels)
        self.blocks = [ConvBlock(widths[i], widths[i + 1], rng) for i in range(5)]
        self.out_channels = channels[-1]

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-3] != self.blocks[0].kernel.shape[1] or x.shape[-2:] != INPUT_SHAPE[1:]:
            raise DimensionError(f"backbone expects (…, {self.blocks[0].kernel.shape[1]}, 64, 64) input, got {x.shape}")
        for i, blk in enumerate(self.blocks):
            x = blk(x)
            if i < 4:
                x = T.maxpool2(x)
        return x


class PretrainHeads(Module):
    """Global-average-pool followed by a class head and a 4-way rotation head."""

    def __init__(self, in_dim: int, n_classes: int, rng: np.random.Generator):
        self.classifier = Linear(in_dim, n_classes, rng)
        self.rotation = Linear(in_dim, 4, rng)

    def forward(self, feats: Tensor) -> tuple[Tensor, Tensor]:
        pooled = T.mean(feats, axis=(-2, -1))
        return self.classifier(pooled), self.rotation(pooled)


class PretrainModel(Module):
    def __init__(self, n_classes: int, seed: int = 0, channels=CHANNELS):
        rng = np.random.default_rng(seed)
        self.backbone = Conv5Backbone(rng, channels)
        self.heads = PretrainHeads(self.backbone.out_channels, n_classes, rng)

    @property
    def n_classes(self) -> int:
        return self.heads.classifier.weight.shape[1]

    def logits(self, images: np.ndarray) -> tuple[Tensor, Tensor]:
        return self.heads(self.backbone(Tensor(images)))


def extract_spatial(backbone: Conv5Backbone, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Frozen eval-mode spatial representation: (3,64,64) -> (C,4,4), or batched (B,3,64,64) -> (B,C,4,4)."""
    images = np.asarray(images, dtype=np.float32)
    single = images.ndim == 3
    if single:
        images = images[None]
    if images.ndim != 4 or images.shape[1:] != INPUT_SHAPE:
        raise DimensionError(f"extract_spatial expects {INPUT_SHAPE} images, got {images.shape[1:] if images.ndim == 4 else images.shape}")
    was_training = backbone.training
    backbone.eval()
    try:
        with no_grad():
            out = np.concatenate([backbone(Tensor(images[i:i + batch_size])).data
                                  for i in range(0, len(images), batch_size)])
    finally:
        backbone.train(was_training)
    return out[0] if single else out


def pooled_features(backbone: Conv5Backbone, images: np.ndarray) -> np.ndarray:
    return extract_spatial(backbone, images).mean(axis=(-2, -1))


def rotate_batch(images: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Rotate each (C,H,W) image by k[i]·90° counter-clockwise."""
    return np.stack([np.rot90(img, int(r), axes=(1, 2)) for img, r in zip(images, k)]).astype(np.float32)


@dataclass
class PretrainConfig:
    epochs: int = 12
    batch_size: int = 32
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    rotation_weight: float = 1.0
    seed: int = 0
    channels: tuple[int, ...] = CHANNELS


@dataclass
class PretrainHistory:
    epoch_loss: list[float]
    epoch_class_loss: list[float]
    step_total: list[float]
    step_class: list[float]
    first_class_loss: float


def pretrain_step(model: PretrainModel, images: np.ndarray, labels: np.ndarray, rot: np.ndarray | None,
                  rotation_weight: float) -> tuple[Tensor, Tensor]:
    """Forward one batch; returns (total loss, class loss).

    With a rotation label batch, rotated copies join the forward pass: they are
    classified by scene label and by rotation index.
    """
    if rot is None or rotation_weight == 0:
        cls_logits, _ = model.logits(images)
        class_loss = T.cross_entropy(cls_logits, labels)
        return class_loss, class_loss
    both = np.concatenate([images, rotate_batch(images, rot)])
    cls_logits, rot_logits = model.logits(both)
    class_loss = T.cross_entropy(cls_logits, np.concatenate([labels, labels]))
    n = len(images)
    rot_loss = T.cross_entropy(rot_logits[n:], rot)
    return class_loss + rot_loss * rotation_weight, class_loss


def _check_labels(labels: np.ndarray, n_classes: int) -> None:
    bad = np.flatnonzero((labels < 0) | (labels >= n_classes))
    if len(bad):
        i = int(bad[0])
        raise DataError(f"sample {i}: label {int(labels[i])} outside [0, {n_classes})")


def pretrain(images: np.ndarray, labels: np.ndarray, n_classes: int, cfg: PretrainConfig,
             model: PretrainModel | None = None) -> tuple[PretrainModel, PretrainHistory]:
    """Train backbone and heads with SGD on cross-entropy (+ rotation loss)."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise DataError("pre-training split is empty")
    _check_labels(labels, n_classes)
    model = model or PretrainModel(n_classes, seed=cfg.seed, channels=cfg.channels)
    model.train()
    set_trainable(model, True)
    params = model.named_parameters()
    if not cfg.rotation_weight:
        # the rotation head is idle and receives no gradient
        params = {k: v for k, v in params.items() if not k.startswith("heads.rotation.")}
    state = OptimizerState("sgd", cfg.learning_rate, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 1])
    hist = PretrainHistory([], [], [], [], float("nan"))
    for epoch in range(cfg.epochs):
        state.learning_rate = optim.step_decay_lr(cfg.learning_rate, epoch, cfg.epochs)
        order = rng.permutation(len(labels))
        t0 = time.time()
        tot, cls, seen = 0.0, 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            rot = rng.integers(0, 4, len(idx)) if cfg.rotation_weight else None
            optim.zero_grad(params)
            loss, class_loss = pretrain_step(model, images[idx], labels[idx], rot, cfg.rotation_weight)
            if epoch == 0 and start == 0:
                hist.first_class_loss = class_loss.item()
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"non-finite pre-training loss at epoch {epoch}, batch {start // cfg.batch_size}")
            loss.backward()
            optim.step(params, state)
            hist.step_total.append(loss.item())
            hist.step_class.append(class_loss.item())
            tot += loss.item() * len(idx)
            cls += class_loss.item() * len(idx)
            seen += len(idx)
        hist.epoch_loss.append(tot / seen)
        hist.epoch_class_loss.append(cls / seen)
        log.info("pretrain epoch %d lr %.4g loss %.4f class %.4f (%.1fs)", epoch, state.learning_rate,
                 tot / seen, cls / seen, time.time() - t0)
    model.eval()
    return model, hist


def class_accuracy(model: PretrainModel, images: np.ndarray, labels: np.ndarray) -> float:
    """Argmax-logit accuracy in eval mode."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("class_accuracy needs a non-empty split")
    _check_labels(labels, model.n_classes)
    was = model.training
    model.eval()
    preds = []
    with no_grad():
        for i in range(0, len(labels), 64):
            logits, _ = model.logits(np.asarray(images[i:i + 64], dtype=np.float32))
            preds.append(logits.data.argmax(axis=1))
    model.train(was)
    return float((np.concatenate(preds) == labels).mean())


def backbone_state(model: PretrainModel) -> dict[str, np.ndarray]:
    return {"pretrain." + k: v for k, v in model.state_dict().items()}


def load_pretrained(state: dict[str, np.ndarray]) -> PretrainModel:
    n_classes = state["pretrain.heads.classifier.weight"].shape[1]
    channels = tuple(state[f"pretrain.backbone.blocks.{i}.kernel"].shape[0] for i in range(5))
    model = PretrainModel(n_classes, channels=channels)
    model.load_state_dict(state, prefix="pretrain.")
    model.eval()
    return model
