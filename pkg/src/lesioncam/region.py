"""Heatmap -> bounding box of the dominant activation region -> image crop."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import BBox
from .errors import ConfigError, EmptyRegionError, ShapeError

_STRUCTURE = {4: ndimage.generate_binary_structure(2, 1), 8: ndimage.generate_binary_structure(2, 2)}


@dataclass(frozen=True)
class RegionParams:
    threshold_frac: float = 0.2
    margin_frac: float = 0.1
    connectivity: int = 8

    def __post_init__(self):
        if not 0 < self.threshold_frac <= 1:
            raise ConfigError(f"threshold_frac must lie in (0, 1], got {self.threshold_frac}")
        if self.margin_frac < 0:
            raise ConfigError(f"margin_frac must be >= 0, got {self.margin_frac}")
        if self.connectivity not in (4, 8):
            raise ConfigError(f"connectivity must be 4 or 8, got {self.connectivity}")


def threshold_mask(heat, threshold_frac) -> np.ndarray:
    heat = np.asarray(heat)
    return heat >= threshold_frac * heat.max()


def label_components(mask, connectivity=8):
    """Label connected components; labels are numbered in row-major order of first pixel."""
    return ndimage.label(np.asarray(mask, bool), structure=_STRUCTURE[connectivity])


def largest_component_bbox(mask, connectivity=8) -> BBox:
    labels, count = label_components(mask, connectivity)
    if count == 0:
        raise EmptyRegionError("mask has no foreground pixels")
    sizes = np.bincount(labels.ravel())[1:]
    # argmax takes the lowest label among equal sizes: the component seen first in scan order
    best = int(np.argmax(sizes)) + 1
    ys, xs = np.nonzero(labels == best)
    return BBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def expand_clamp(bbox: BBox, margin_frac, image_w, image_h) -> BBox:
    dx = math.floor(margin_frac * bbox.width + 1e-9)
    dy = math.floor(margin_frac * bbox.height + 1e-9)
    return BBox(max(0, bbox.x0 - dx), max(0, bbox.y0 - dy), min(image_w, bbox.x1 + dx), min(image_h, bbox.y1 + dy))


@dataclass
class Region:
    crop: np.ndarray
    bbox: BBox
    mask: np.ndarray


def extract_import_region(image, heat, params: RegionParams = RegionParams()) -> Region:
    """Threshold the heatmap, take the largest component's box, pad it, crop the image.

    The crop is a copy of source pixels; resizing to a network input is the caller's job.
    """
    image = np.asarray(image)
    heat = np.asarray(heat)
    if heat.shape != image.shape[:2]:
        raise ShapeError(f"heatmap {heat.shape} must match image {image.shape[:2]}")
    mask = threshold_mask(heat, params.threshold_frac)
    box = largest_component_bbox(mask, params.connectivity)
    box = expand_clamp(box, params.margin_frac, image.shape[1], image.shape[0])
    return Region(box.crop(image).copy(), box, mask)
