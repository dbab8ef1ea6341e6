"""Per-pixel foreground posterior against a Gaussian background model.

The background colour of every pixel is a per-channel Gaussian, the
foreground is uniform over the 8-bit colour cube and both classes get the
same prior, so the foreground posterior is ``u / (u + g)``. Everything is
evaluated from log densities so that three-channel products cannot
underflow.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.special import expit

from .exceptions import DimensionMismatch, EmptyInput

SIGMA_FLOOR = 1.0
LOG_UNIFORM_FG = -3.0 * np.log(256.0)
_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass(frozen=True)
class BackgroundModel:
    mean: np.ndarray
    sigma: np.ndarray
    sigma_floor: float = SIGMA_FLOOR

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if mean.shape != sigma.shape or mean.ndim != 3 or mean.shape[2] != 3:
            raise DimensionMismatch("mean and sigma must both be (H, W, 3)")
        sigma = np.maximum(sigma, self.sigma_floor)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "sigma", sigma)

    @property
    def shape(self):
        return self.mean.shape[:2]


@dataclass(frozen=True)
class SilhouetteLikelihoodMap:
    values: np.ndarray
    camera_id: int = 0


@dataclass(frozen=True)
class EdgeMap:
    values: np.ndarray
    camera_id: int = 0


def train_background(frames, sigma_floor=SIGMA_FLOOR) -> BackgroundModel:
    """Per-pixel, per-channel sample mean and population standard deviation."""
    frames = list(frames)
    if not frames:
        raise EmptyInput("train_background needs at least one frame")
    shape = np.shape(frames[0])
    if len(shape) != 3 or shape[2] != 3:
        raise DimensionMismatch(f"background frames must be (H, W, 3), got {shape}")
    for f in frames[1:]:
        if np.shape(f) != shape:
            raise DimensionMismatch(f"frame of shape {np.shape(f)} does not match {shape}")
    stack = np.stack([np.asarray(f, dtype=np.float64) for f in frames])
    return BackgroundModel(stack.mean(axis=0), stack.std(axis=0), sigma_floor)


def log_background_density(model: BackgroundModel, image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.shape != model.mean.shape:
        raise DimensionMismatch(f"image {img.shape} does not match background {model.mean.shape}")
    z = (img - model.mean) / model.sigma
    return np.sum(-0.5 * z * z - np.log(model.sigma) - _LOG_SQRT_2PI, axis=2)


def compute_slm(model: BackgroundModel, image, camera_id=0) -> SilhouetteLikelihoodMap:
    log_g = log_background_density(model, image)
    return SilhouetteLikelihoodMap(expit(LOG_UNIFORM_FG - log_g), camera_id)


def compute_edge_map(binary, camera_id=0) -> EdgeMap:
    """Edge proximity field of a binary silhouette.

    Pixels where the Sobel gradient of the silhouette is nonzero are edge
    pixels (value 1). Around them the field falls off as a normalised 5x5
    box average of the edge indicator, so values lie in [0, 1] and reach 1
    exactly on the edge pixels.
    """
    b = np.asarray(binary)
    if b.ndim != 2:
        raise DimensionMismatch("edge maps are computed from (H, W) images")
    b = (b > 0).astype(np.float64)
    gx = ndimage.sobel(b, axis=1, mode="nearest")
    gy = ndimage.sobel(b, axis=0, mode="nearest")
    edge = ((gx * gx + gy * gy) > 0).astype(np.float64)
    # direct window sums keep pixels with no nearby edge at exactly 0
    blurred = ndimage.correlate(edge, np.ones((5, 5)), mode="constant", cval=0.0) / 25.0
    return EdgeMap(np.clip(np.maximum(edge, blurred), 0.0, 1.0), camera_id)
