"""Supervised source training for the segmentation model.

Plain cross-entropy over shuffled mini-batches with batch-statistics
normalization.  During the final epoch the per-layer batch moments are
folded into running averages (momentum 0.1), and those become the
checkpoint's frozen source statistics.
"""

from __future__ import annotations

import numpy as np

from .autograd import Tensor, backward, cross_entropy_loss
from .checkpoint import Checkpoint, checkpoint_from_model
from .errors import ConfigError, NumericError
from .model import Model, forward_segment
from .optim import adam_step
from .rng import PURPOSE_AUGMENT, PURPOSE_TRAIN_SHUFFLE, stream
from .stats import ChannelStats

RUNNING_MOMENTUM = 0.1

# default source recipe: staged Adam with a decaying learning rate.  The
# defaults were tuned on held-out scenes; the last stage's final epoch is
# the one whose batch moments become the frozen source statistics.
DEFAULT_STAGES = ((30, 1e-2), (30, 5e-3), (25, 2e-3))

# photometric jitter ranges for source training.  The mild end of the
# deployment-time lighting changes falls inside these ranges, so features
# keep working when activations arrive slightly mis-scaled; the severe
# ends (night at 0.1x luminance, heavy fog) stay far outside them.
JITTER_SCALE = (0.6, 1.35)
JITTER_CONTRAST = (0.7, 1.25)
JITTER_BIAS = 0.06


def photometric_jitter(images: np.ndarray, rng) -> np.ndarray:
    """Per-image random brightness, contrast, and channel bias; labels untouched."""
    out = np.empty_like(images)
    for i, image in enumerate(images):
        scale = rng.uniform(*JITTER_SCALE)
        contrast = rng.uniform(*JITTER_CONTRAST)
        bias = rng.uniform(-JITTER_BIAS, JITTER_BIAS, size=(3, 1, 1))
        mean = image.mean(axis=(1, 2), keepdims=True)
        out[i] = (mean + (image - mean) * contrast) * scale + bias
    return np.clip(out, 0.0, 1.0, out=out)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """N x H x W integer labels to N x K x H x W float32 indicator maps."""
    return (labels[:, None, :, :] == np.arange(num_classes)[None, :, None, None]) \
        .astype(np.float32)


def train_source(model: Model, dataset: list, epochs: int, lr: float, seed: int,
                 batch_size: int = 8, loss_log: list | None = None,
                 jitter: bool = True) -> Checkpoint:
    """Train on (image, labels) pairs and return the source checkpoint.

    With 0 epochs the checkpoint is the untouched initialization, source
    stats still at (0, 1).  Divergence aborts with the seed and step that
    produced the non-finite loss.

    The frozen statistics are collected over the same jittered batches the
    model trains on, so they describe the distribution the features know.
    """
    if not dataset:
        raise ConfigError("train_source needs a nonempty dataset")
    if epochs == 0:
        return checkpoint_from_model(model)

    k = model.spec.num_classes
    model.store.set_trainable([p.name for p in model.store])
    running: dict[str, ChannelStats] = {}

    n = len(dataset)
    for epoch in range(epochs):
        order = stream(seed, PURPOSE_TRAIN_SHUFFLE, epoch).permutation(n)
        aug_rng = stream(seed, PURPOSE_AUGMENT, epoch)
        final_epoch = epoch == epochs - 1
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            images = np.stack([dataset[i][0] for i in idx]).astype(np.float32)
            labels = np.stack([dataset[i][1] for i in idx])
            if jitter:
                images = photometric_jitter(images, aug_rng)
            collect: dict | None = {} if final_epoch else None
            logits = forward_segment(model, Tensor(images), bn_mode="batch", collect=collect)
            loss = cross_entropy_loss(logits, one_hot(labels, k))
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise NumericError(f"training diverged: non-finite loss at seed {seed}, "
                                   f"epoch {epoch}, batch {start // batch_size}")
            if loss_log is not None:
                loss_log.append(loss_val)
            backward(loss)
            adam_step(model.store, lr=lr)
            if final_epoch:
                for name, bstats in collect["batch_stats"]:
                    if name not in running:
                        running[name] = bstats.copy()
                    else:
                        prev = running[name]
                        running[name] = ChannelStats(
                            (1.0 - RUNNING_MOMENTUM) * prev.mu + RUNNING_MOMENTUM * bstats.mu,
                            (1.0 - RUNNING_MOMENTUM) * prev.sigma
                            + RUNNING_MOMENTUM * bstats.sigma,
                        )

    for name in model.bn_order:
        layer = model.bn_layers[name]
        layer.src_mu = running[name].mu.astype(np.float32)
        layer.src_sigma = running[name].sigma.astype(np.float32)
    return checkpoint_from_model(model)


def train_source_recipe(model: Model, dataset: list, seed: int,
                        stages=DEFAULT_STAGES, batch_size: int = 8,
                        loss_log: list | None = None,
                        jitter: bool = True) -> Checkpoint:
    """Run the staged schedule; each stage shuffles under its own stream."""
    from .rng import derive_seed

    ckpt = checkpoint_from_model(model)
    for i, (epochs, lr) in enumerate(stages):
        ckpt = train_source(model, dataset, epochs=epochs, lr=lr,
                            seed=derive_seed(seed, PURPOSE_TRAIN_SHUFFLE, i),
                            batch_size=batch_size, loss_log=loss_log,
                            jitter=jitter)
    return ckpt


def evaluate_miou(model: Model, dataset: list, batch_size: int = 8,
                  bn_mode: str = "source") -> float:
    """Pooled mIoU over (image, labels) pairs, no parameter movement."""
    from .metrics import ConfusionMatrix, argmax_labels, miou

    if not dataset:
        raise ConfigError("cannot evaluate an empty dataset")
    cm = ConfusionMatrix(model.spec.num_classes)
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start:start + batch_size]
        images = np.stack([image for image, _ in chunk])
        labels = np.stack([lab for _, lab in chunk])
        logits = forward_segment(model, Tensor(images), bn_mode=bn_mode,
                                 update_state=False)
        cm.update(argmax_labels(logits.data), labels)
    return miou(cm)
