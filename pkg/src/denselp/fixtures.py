"""Seeded synthetic segmentation problems, so tests need no dataset download."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import EnergyModel, FeatureField, GaussianKernel

# Small weights keep each pixel's total kernel mass at a few units, the regime in
# which a handful of Frank-Wolfe steps per proximal step (lambda = 0.1) suffices.
DEFAULT_KERNELS = (
    GaussianKernel(0.02, "spatial", (3.0,)),
    GaussianKernel(0.02, "bilateral", (20.0, 20.0)),
)

# one tint per label, added on top of the gradient so bilateral edges line up with the labels
_TINTS = np.array(
    [
        [60.0, 0.0, 0.0],
        [0.0, 60.0, 0.0],
        [0.0, 0.0, 60.0],
        [60.0, 60.0, 0.0],
        [0.0, 60.0, 60.0],
        [60.0, 0.0, 60.0],
    ]
)


@dataclass
class SyntheticProblem:
    image: FeatureField
    unaries: np.ndarray
    truth: np.ndarray
    kernels: tuple

    def model(self, exact: bool = False) -> EnergyModel:
        return EnergyModel.from_image(self.unaries, self.image, self.kernels, exact=exact)


def checkerboard_labels(width: int, height: int, m: int, block: int = 16) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width]
    return ((xx // block) + 2 * (yy // block)) % m


def synthetic_problem(
    seed: int = 0,
    width: int = 64,
    height: int = 64,
    m: int = 4,
    noise: float = 1.5,
    color_noise: float = 10.0,
    kernels=DEFAULT_KERNELS,
) -> SyntheticProblem:
    """Checkerboard ground truth, colour-gradient image and noisy ``-log softmax`` unaries."""
    rng = np.random.default_rng(seed)
    truth = checkerboard_labels(width, height, m)
    yy, xx = np.mgrid[0:height, 0:width]
    gradient = np.stack(
        [120.0 * xx / max(width - 1, 1), 120.0 * yy / max(height - 1, 1), np.full(xx.shape, 60.0)],
        axis=-1,
    )
    tint = _TINTS[truth % len(_TINTS)]
    rgb = gradient + tint + rng.normal(0.0, color_noise, gradient.shape)
    rgb = np.clip(np.rint(rgb), 0, 255)

    logits = 2.0 * (truth.ravel()[:, None] == np.arange(m)) + rng.normal(0.0, noise, (width * height, m))
    logits -= logits.max(axis=1, keepdims=True)
    unaries = -(logits - np.log(np.exp(logits).sum(axis=1, keepdims=True)))
    image = FeatureField(width, height, rgb.reshape(-1, 3))
    return SyntheticProblem(image, unaries, truth.ravel(), tuple(kernels))
