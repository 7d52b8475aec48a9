"""Class activation maps: per-class weighted sums of the last conv feature maps."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import bilinear, encode_image
from .errors import ShapeError, UsageError


@dataclass
class CamMap:
    class_id: int
    grid: np.ndarray  # (h, w) raw, unnormalized


def compute_cam(trace, fc_weights, class_id, index=0) -> CamMap:
    """M_c(x, y) = sum_k w[k, c] * f_k(x, y) for sample ``index`` of the trace."""
    fc_weights = np.asarray(fc_weights)
    if not 0 <= class_id < fc_weights.shape[1]:
        raise UsageError(f"class_id {class_id} out of range [0, {fc_weights.shape[1]})")
    fmaps = trace.feature_maps[index]
    if fmaps.shape[0] != fc_weights.shape[0]:
        raise ShapeError(f"feature maps {fmaps.shape} vs fc weights {fc_weights.shape}")
    grid = np.tensordot(fc_weights[:, class_id], fmaps, axes=(0, 0))
    return CamMap(class_id, grid.astype(np.float32))


def predicted_class(probs) -> int:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return int(np.argmax(probs))


def cam_for_predicted(trace, fc_weights, index=0) -> CamMap:
    return compute_cam(trace, fc_weights, predicted_class(trace.probs[index]), index)


def upsample_bilinear(grid, target_w, target_h) -> np.ndarray:
    grid = np.asarray(grid)
    h, w = grid.shape
    if target_w < w or target_h < h:
        raise UsageError(f"cannot upsample {w}x{h} to smaller {target_w}x{target_h}")
    if (target_h, target_w) == (h, w):
        return grid.astype(np.float64)
    return bilinear(grid, target_h, target_w)


def normalize(grid) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant grid maps to zeros."""
    grid = np.asarray(grid, dtype=np.float64)
    lo, hi = grid.min(), grid.max()
    if hi == lo:
        return np.zeros_like(grid)
    return (grid - lo) / (hi - lo)


def heatmap(cam: CamMap, target_w, target_h) -> np.ndarray:
    return normalize(upsample_bilinear(cam.grid, target_w, target_h))


# blue at 0, yellow at 0.5, red at 1
COLORMAP_STOPS = np.array([[0.0, 0.0, 255.0], [255.0, 255.0, 0.0], [255.0, 0.0, 0.0]])


def colormap(heat) -> np.ndarray:
    """Piecewise-linear blue -> yellow -> red; returns float RGB in [0, 255]."""
    heat = np.clip(np.asarray(heat, dtype=np.float64), 0, 1)[..., None]
    low = COLORMAP_STOPS[0] + (COLORMAP_STOPS[1] - COLORMAP_STOPS[0]) * (heat * 2)
    high = COLORMAP_STOPS[1] + (COLORMAP_STOPS[2] - COLORMAP_STOPS[1]) * (heat * 2 - 1)
    return np.where(heat <= 0.5, low, high)


def render_overlay(image, heat, alpha=0.5) -> np.ndarray:
    image = np.asarray(image)
    if image.shape[:2] != np.shape(heat):
        raise ShapeError(f"heatmap {np.shape(heat)} does not match image {image.shape[:2]}")
    if not 0 <= alpha <= 1:
        raise UsageError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 0:
        return image.copy()
    rgb = image if image.ndim == 3 else np.repeat(image[..., None], 3, axis=2)
    blend = (1 - alpha) * rgb.astype(np.float64) + alpha * colormap(heat)
    return np.clip(np.rint(blend), 0, 255).astype(np.uint8)


def heatmap_to_u8(heat) -> np.ndarray:
    return np.rint(np.clip(heat, 0, 1) * 255).astype(np.uint8)


def save_heatmap_pgm(heat, path):
    encode_image(heatmap_to_u8(heat), Path(path))
