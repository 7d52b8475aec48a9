"""Deterministic training-set expansion: quarter-turn rotations, horizontal flips, five crops."""
from __future__ import annotations

from dataclasses import dataclass, replace
from itertools import product

import numpy as np

from .errors import ConfigError, UsageError


def rotate90(image, k):
    """Rotate ``k`` quarter turns clockwise."""
    if k not in (0, 1, 2, 3):
        raise UsageError(f"k must be in {{0, 1, 2, 3}}, got {k}")
    return np.rot90(np.asarray(image), -k).copy()


def hflip(image):
    return np.asarray(image)[:, ::-1].copy()


def five_crop(image, crop_w, crop_h):
    """Top-left, top-right, bottom-left, bottom-right and centre crops, in that order."""
    image = np.asarray(image)
    h, w = image.shape[:2]
    if crop_w > w or crop_h > h or crop_w < 1 or crop_h < 1:
        raise UsageError(f"crop {crop_w}x{crop_h} does not fit image {w}x{h}")
    cy, cx = (h - crop_h) // 2, (w - crop_w) // 2
    origins = [(0, 0), (0, w - crop_w), (h - crop_h, 0), (h - crop_h, w - crop_w), (cy, cx)]
    return [image[y:y + crop_h, x:x + crop_w].copy() for y, x in origins]


@dataclass(frozen=True)
class AugmentPolicy:
    rotations: tuple[int, ...] = (0, 1, 2)
    hflip: bool = False
    five_crop: int | None = None  # square crop side

    def __post_init__(self):
        rots = tuple(sorted(set(self.rotations)))
        if 0 not in rots or not set(rots) <= {0, 1, 2, 3}:
            raise ConfigError(f"rotations must be a subset of {{0,1,2,3}} containing 0, got {self.rotations}")
        object.__setattr__(self, "rotations", rots)
        if self.five_crop is not None and self.five_crop < 1:
            raise ConfigError(f"five_crop size must be positive, got {self.five_crop}")

    @classmethod
    def identity(cls):
        return cls(rotations=(0,))

    @property
    def multiplier(self) -> int:
        return len(self.rotations) * (2 if self.hflip else 1) * (5 if self.five_crop else 1)


@dataclass(frozen=True)
class Variant:
    rotation: int
    flip: bool
    crop: int | None

    def suffix(self):
        s = f"_r{self.rotation}"
        if self.flip:
            s += "_f"
        if self.crop is not None:
            s += f"_c{self.crop}"
        return s


def variants(policy: AugmentPolicy) -> list[Variant]:
    flips = (False, True) if policy.hflip else (False,)
    crops = range(5) if policy.five_crop else (None,)
    return [Variant(r, f, c) for r, f, c in product(policy.rotations, flips, crops)]


def apply_variant(image, variant: Variant, policy: AugmentPolicy):
    out = rotate90(image, variant.rotation)
    if variant.flip:
        out = hflip(out)
    if variant.crop is not None:
        out = five_crop(out, policy.five_crop, policy.five_crop)[variant.crop]
    return out


def expand_dataset(records, policy: AugmentPolicy):
    """One record per (record, rotation, flip, crop) with id ``<id>_r<k>[_f][_c<i>]``.

    The identity policy returns the records unchanged. Records need an
    ``image_id`` field and are copied with ``dataclasses.replace``.
    """
    records = list(records)
    if policy.multiplier == 1:
        return records
    vs = variants(policy)
    return [replace(rec, image_id=rec.image_id + v.suffix()) for rec in records for v in vs]


def expand_images(images, labels, policy: AugmentPolicy):
    """Materialize every variant of every image; returns (list of images, label array)."""
    vs = variants(policy)
    out_images, out_labels = [], []
    for img, lab in zip(images, labels):
        for v in vs:
            out_images.append(apply_variant(img, v, policy))
            out_labels.append(lab)
    return out_images, np.asarray(out_labels)
