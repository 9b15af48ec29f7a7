"""Training loop: mini-batch SGD on the Dice loss with online augmentation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .loss import dice_loss
from .model import SegModel, build_frame_stack
from .optim import OptimizerState, sgd_step


@dataclass
class TrainSample:
    """One training example: a 4-channel frame stack and its binary mask."""

    frames: np.ndarray  # (4, h, w) float
    mask: np.ndarray    # (h, w) uint8

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        self.mask = np.asarray(self.mask)
        if self.frames.ndim != 3 or self.frames.shape[0] != 4:
            raise ValueError("frames must be a (4, h, w) array")
        if self.mask.shape != self.frames.shape[1:]:
            raise ValueError("mask shape must match the frames")


def sequence_to_samples(frames, masks) -> list:
    """Expand one annotated sequence into per-frame training samples
    (each frame stacked with its three predecessors)."""
    if len(frames) != len(masks):
        raise ValueError("need one mask per frame")
    out = []
    for i in range(len(frames)):
        mask = masks[i].data if hasattr(masks[i], "data") else np.asarray(masks[i])
        out.append(TrainSample(build_frame_stack(frames, i), mask.astype(np.uint8)))
    return out


def train(samples, model: SegModel, opt: OptimizerState, epochs: int,
          rng: np.random.Generator, augment_config=None, batch_size: int = 4,
          on_epoch=None) -> list:
    """Train ``model`` in place; returns the per-epoch mean loss trace.

    Augmentation (when configured) draws fresh parameters per sample per
    epoch from ``rng``; the same generator drives shuffling and dropout, so a
    fixed seed reproduces the run exactly.
    """
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    samples = list(samples)
    if not samples and epochs > 0:
        raise ValueError("empty training set")
    if augment_config is not None:
        from ..augment import augment_arrays
    dtype = model.dtype
    params = model.parameters()
    trace = []
    for _ in range(epochs):
        order = rng.permutation(len(samples))
        loss_sum = 0.0
        for start in range(0, len(order), batch_size):
            batch = [samples[k] for k in order[start:start + batch_size]]
            xs, ts = [], []
            for s in batch:
                frames, mask = s.frames, s.mask
                if augment_config is not None:
                    frames, mask, _ = augment_arrays(frames, mask, augment_config, rng)
                xs.append(frames.astype(dtype, copy=False))
                ts.append(mask.astype(dtype))
            x = np.stack(xs)
            y = model.forward(x, mode="train", rng=rng)
            grad = np.empty_like(y)
            for k, t in enumerate(ts):
                loss_k, grad_k = dice_loss(t, y[k, 0])
                loss_sum += loss_k
                grad[k, 0] = grad_k / len(batch)
            model.backward(grad)
            sgd_step(params, model.gradients(), opt)
        mean_loss = loss_sum / len(samples)
        trace.append(mean_loss)
        if on_epoch is not None:
            on_epoch(len(trace) - 1, mean_loss)
    return trace
