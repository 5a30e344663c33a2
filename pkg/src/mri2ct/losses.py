"""Composite generator objective and the discriminator objective.

total = lambda_gan * L_gan + lambda_l1 * L_l1 + lambda_perc * L_perc

with the adversarial terms in numerically stable BCE-with-logits form
(softplus), the reconstruction term a plain voxel-wise mean absolute error,
and the perceptual term an L1 distance between feature maps of axial slices
under a fixed (non-trained) 2-D feature extractor.

Pretrained perceptual weights are an external asset this repo does not
ship; the default extractor is a seeded 4-layer strided conv net behind the
same interface, so a heavier backbone can be plugged in without touching
the loss code.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    lambda_gan: float = 1.0
    lambda_l1: float = 20.0
    lambda_perc: float = 1.0

    def __post_init__(self):
        if min(self.lambda_gan, self.lambda_l1, self.lambda_perc) < 0:
            raise ValueError("loss weights must be nonnegative")

    def to_dict(self):
        return {"lambda_gan": self.lambda_gan, "lambda_l1": self.lambda_l1,
                "lambda_perc": self.lambda_perc}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def gan_loss_generator(fake_logits):
    """Non-saturating generator loss: mean BCE-with-logits against target 1,
    i.e. mean(softplus(-logit))."""
    return T.mean_all(T.softplus(T.mul_scalar(fake_logits, -1.0)))


def gan_loss_discriminator(real_logits, fake_logits):
    """0.5 * [BCE(real, 1) + BCE(fake, 0)] on raw logit maps."""
    real_term = T.mean_all(T.softplus(T.mul_scalar(real_logits, -1.0)))
    fake_term = T.mean_all(T.softplus(fake_logits))
    return T.mul_scalar(real_term + fake_term, 0.5)


def l1_loss(pred, target):
    """Mean absolute difference over all voxels."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return T.mean_all(T.abs_(pred - target))


class SlicedFeatureExtractor:
    """Fixed, seeded 2-D conv feature network applied to every axial slice.

    Four conv+ReLU layers with spatial stride 2 in-plane (depth untouched:
    kernels are 1 x 3 x 3, so the whole volume is processed in one pass but
    every slice independently), with a tap after each layer.  Parameters are
    drawn once from the seed and never trained; single-channel volumes are
    replicated to ``in_channels``.
    """

    def __init__(self, seed=0, in_channels=3, widths=(8, 16, 16, 16),
                 dtype=np.float32):
        self.seed = int(seed)
        self.in_channels = int(in_channels)
        self.widths = tuple(widths)
        self.tap_names = tuple(f"conv{i + 1}" for i in range(len(self.widths)))
        rng = np.random.default_rng(self.seed)
        self.layers = []
        prev = self.in_channels
        for wch in self.widths:
            std = np.sqrt(2.0 / (prev * 9))
            w = rng.normal(0.0, std, size=(wch, prev, 1, 3, 3)).astype(dtype)
            self.layers.append((Tensor(w), Tensor(np.zeros(wch, dtype=dtype))))
            prev = wch

    def features(self, vol):
        """Volume [B,1,D,H,W] -> list of per-layer feature maps."""
        if vol.ndim != 5:
            raise ValueError("expected [B,C,D,H,W]")
        x = vol
        if vol.shape[1] != self.in_channels:
            if vol.shape[1] != 1:
                raise ValueError(
                    f"extractor wants {self.in_channels} channels, got {vol.shape[1]}")
            x = T.concat([vol] * self.in_channels, axis=1)
        taps = []
        for w, b in self.layers:
            x = T.relu(_conv2d_slices(x, w, b))
            taps.append(x)
        return taps


def _conv2d_slices(x, w, b):
    # depth-1 kernel, in-plane stride 2: per-slice 2-D convolution
    return T.conv3d(x, w, b, stride=(1, 2, 2), dilation=1, padding=(0, 1, 1))


def perceptual_loss(pred, target, fx):
    """Mean over tapped layers of mean-abs feature differences; zero iff the
    feature maps agree on every tap."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    fp = fx.features(pred)
    with T.no_grad():
        ft = fx.features(target.detach())
    total = None
    for a, b in zip(fp, ft):
        term = T.mean_all(T.abs_(a - b))
        total = term if total is None else total + term
    return T.mul_scalar(total, 1.0 / len(fp))


def total_generator_loss(gan, l1, perc, weights):
    """Weighted sum of the three scalar loss tensors.

    Returns (total, parts) where parts reports each unweighted component and
    the float total, computed in float64 so the lambda-linearity of the sum
    is testable to machine precision.
    """
    total = (T.mul_scalar(gan, weights.lambda_gan)
             + T.mul_scalar(l1, weights.lambda_l1)
             + T.mul_scalar(perc, weights.lambda_perc))
    parts = {
        "gan": gan.item(),
        "l1": l1.item(),
        "perc": perc.item(),
        "total": (weights.lambda_gan * gan.item()
                  + weights.lambda_l1 * l1.item()
                  + weights.lambda_perc * perc.item()),
    }
    return total, parts
