"""Fixed residual post-processing chain applied to every scorer's output.

Order is not configurable: erode the brain mask, multiply, keep positive
residuals (optional), 3D median filter, then (when a threshold is given)
binarize and drop connected components smaller than ``min_component_voxels``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import InvalidConfig, ShapeMismatch

_CONNECTIVITY_RANK = {6: 1, 18: 2, 26: 3}


@dataclass(frozen=True)
class PostprocConfig:
    erosion_radius: int = 3
    keep_positive_only: bool = True
    median_kernel: tuple = (5, 5, 5)
    min_component_voxels: int = 8
    connectivity: int = 26
    threshold: Optional[float] = None

    def __post_init__(self):
        if self.connectivity not in _CONNECTIVITY_RANK:
            raise InvalidConfig(f"connectivity must be 6, 18 or 26, got {self.connectivity}")
        if self.erosion_radius < 0:
            raise InvalidConfig("erosion_radius must be >= 0")
        if self.threshold is not None and not 0.0 <= self.threshold <= 1.0:
            raise InvalidConfig("threshold must lie in [0, 1]")
        object.__setattr__(self, "median_kernel", tuple(int(k) for k in self.median_kernel))


def ball(radius: int) -> np.ndarray:
    """City-block (6-neighbourhood) ball of the given radius."""
    r = int(radius)
    g = np.abs(np.indices((2 * r + 1,) * 3) - r).sum(axis=0)
    return g <= r


def erode_mask(mask: np.ndarray, radius: int = 3) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if radius <= 0:
        return mask.copy()
    # outside the volume counts as background
    return ndimage.binary_erosion(mask, structure=ball(radius), border_value=0)


def signed_to_scored(residual_signed: np.ndarray, keep_positive_only: bool) -> np.ndarray:
    residual_signed = np.asarray(residual_signed)
    if keep_positive_only:
        return np.maximum(residual_signed, 0.0)
    return np.abs(residual_signed)


def median_filter_3d(scores: np.ndarray, kernel=(5, 5, 5)) -> np.ndarray:
    # 'nearest' is edge replication
    return ndimage.median_filter(np.asarray(scores), size=tuple(kernel), mode="nearest")


def binarize(scores: np.ndarray, t: float) -> np.ndarray:
    return np.asarray(scores) > t


def prune_components(b: np.ndarray, min_voxels: int = 8, connectivity: int = 26) -> np.ndarray:
    """Remove connected components with fewer than ``min_voxels`` voxels."""
    b = np.asarray(b, dtype=bool)
    if connectivity not in _CONNECTIVITY_RANK:
        raise InvalidConfig(f"connectivity must be 6, 18 or 26, got {connectivity}")
    structure = ndimage.generate_binary_structure(3, _CONNECTIVITY_RANK[connectivity])
    labels, n = ndimage.label(b, structure=structure)
    if n == 0:
        return b.copy()
    sizes = np.bincount(labels.ravel())
    keep = sizes >= min_voxels
    keep[0] = False
    return keep[labels]


def postprocess_scores(signed_residual, brain_mask, cfg: PostprocConfig) -> np.ndarray:
    """Continuous part of the chain: mask, positive filter, median filter.

    Masking is applied before the median filter and again after it, so no
    voxel outside the eroded brain mask ends up with a nonzero score.
    """
    signed_residual = np.asarray(signed_residual, dtype=np.float32)
    if signed_residual.shape != np.shape(brain_mask):
        raise ShapeMismatch(f"scores {signed_residual.shape} vs mask {np.shape(brain_mask)}")
    eroded = erode_mask(brain_mask, cfg.erosion_radius)
    scores = signed_residual * eroded
    scores = signed_to_scored(scores, cfg.keep_positive_only)
    scores = median_filter_3d(scores, cfg.median_kernel)
    return (scores * eroded).astype(np.float32)


def binarize_and_prune(scores, t: float, cfg: PostprocConfig) -> np.ndarray:
    return prune_components(binarize(scores, t), cfg.min_component_voxels, cfg.connectivity)


def run_pipeline(signed_residual, brain_mask, cfg: PostprocConfig):
    """Return ``(continuous scores, binary volume or None)``."""
    scores = postprocess_scores(signed_residual, brain_mask, cfg)
    binary = None
    if cfg.threshold is not None:
        binary = binarize_and_prune(scores, cfg.threshold, cfg)
    return scores, binary
