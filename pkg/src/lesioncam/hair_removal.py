"""DullRazor-style dark hair removal.

Steps: grayscale closing with line structuring elements at four orientations,
thresholding the closing residue, rejecting components that are not thin and
long, two-axis linear inpainting, and an adaptive median pass restricted to
the (slightly dilated) hair mask.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .errors import ConfigError, DegenerateInputError, ShapeError
from .region import label_components

ORIENTATIONS = (0, 45, 90, 135)


@dataclass(frozen=True)
class HairParams:
    se_length: int = 9
    diff_threshold: int = 20
    min_length: int = 15
    max_mean_width: float = 5.0
    median_max_window: int = 7

    def __post_init__(self):
        if self.se_length < 3 or self.se_length % 2 == 0:
            raise ConfigError(f"se_length must be odd and >= 3, got {self.se_length}")
        if not 0 < self.diff_threshold < 255:
            raise ConfigError(f"diff_threshold must lie in (0, 255), got {self.diff_threshold}")
        if self.min_length <= 0 or self.max_mean_width <= 0:
            raise ConfigError("min_length and max_mean_width must be positive")
        if self.median_max_window < 3 or self.median_max_window % 2 == 0:
            raise ConfigError(f"median_max_window must be odd and >= 3, got {self.median_max_window}")


def line_offsets(length, angle):
    """(dy, dx) offsets of a centred digital line segment; y grows downwards."""
    r = length // 2
    t = np.arange(-r, r + 1)
    zero = np.zeros_like(t)
    dy, dx = {0: (zero, t), 90: (t, zero), 45: (-t, t), 135: (t, t)}[angle]
    return list(zip(dy.tolist(), dx.tolist()))


def _line_extreme(channel, offsets, reduce):
    r = max(max(abs(dy), abs(dx)) for dy, dx in offsets)
    h, w = channel.shape
    padded = np.pad(channel, r, mode="edge")
    out = None
    for dy, dx in offsets:
        view = padded[r + dy:r + dy + h, r + dx:r + dx + w]
        out = view.copy() if out is None else reduce(out, view, out=out)
    return out


def line_dilate(channel, length, angle):
    return _line_extreme(channel, line_offsets(length, angle), np.maximum)


def line_erode(channel, length, angle):
    return _line_extreme(channel, line_offsets(length, angle), np.minimum)


def generalized_closing(channel, se_length=9) -> np.ndarray:
    """Pixelwise max of the line closings at 0, 45, 90 and 135 degrees."""
    channel = np.asarray(channel)
    result = None
    for angle in ORIENTATIONS:
        closed = line_erode(line_dilate(channel, se_length, angle), se_length, angle)
        result = closed if result is None else np.maximum(result, closed)
    return result


def _channels(image):
    image = np.asarray(image)
    return image[..., None] if image.ndim == 2 else image


def build_hair_mask(original, closed, diff_threshold) -> np.ndarray:
    original, closed = _channels(original), _channels(closed)
    if original.shape != closed.shape:
        raise ShapeError(f"original {original.shape} and closed {closed.shape} differ")
    residue = closed.astype(np.int16) - original.astype(np.int16)
    return residue.max(axis=2) >= diff_threshold


def verify_structures(mask, min_length=15, max_mean_width=5.0) -> np.ndarray:
    """Keep 8-connected components whose longest bbox side >= min_length and area/side <= max_mean_width."""
    mask = np.asarray(mask, bool)
    labels, count = label_components(mask, 8)
    if count == 0:
        return np.zeros_like(mask)
    areas = np.bincount(labels.ravel(), minlength=count + 1)
    keep = np.zeros(count + 1, bool)
    for lab, sl in enumerate(ndimage.find_objects(labels), start=1):
        side = max(sl[0].stop - sl[0].start, sl[1].stop - sl[1].start)
        keep[lab] = side >= min_length and areas[lab] / side <= max_mean_width
    return keep[labels]


def _nearest_valid(valid, axis):
    """Index of the nearest valid cell before and after each cell along ``axis`` (-1 / n if none)."""
    n = valid.shape[axis]
    idx = np.arange(n).reshape((-1, 1) if axis == 0 else (1, -1))
    before = np.maximum.accumulate(np.where(valid, idx, -1), axis=axis)
    after_src = np.where(valid, idx, n)
    after = np.flip(np.minimum.accumulate(np.flip(after_src, axis=axis), axis=axis), axis=axis)
    return before, after


def inpaint_bilinear(image, mask) -> np.ndarray:
    """Fill masked pixels by linear interpolation along the row or column with the shorter gap."""
    image = np.asarray(image)
    mask = np.asarray(mask, bool)
    if mask.shape != image.shape[:2]:
        raise ShapeError(f"mask {mask.shape} does not match image {image.shape[:2]}")
    if not mask.any():
        return image.copy()
    if mask.all():
        raise DegenerateInputError("every pixel is masked; nothing to interpolate from")
    h, w = mask.shape
    valid = ~mask
    left, right = _nearest_valid(valid, 1)
    up, down = _nearest_valid(valid, 0)
    ys, xs = np.nonzero(mask)
    l, r, u, d = left[ys, xs], right[ys, xs], up[ys, xs], down[ys, xs]
    h_ok = (l >= 0) & (r < w)
    v_ok = (u >= 0) & (d < h)
    h_gap = np.where(h_ok, r - l, np.iinfo(np.int64).max)
    v_gap = np.where(v_ok, d - u, np.iinfo(np.int64).max)
    use_h = h_ok & (h_gap <= v_gap)
    use_v = v_ok & ~use_h
    src = _channels(image).astype(np.float64)
    out = src.copy()

    t = ((xs - l) / np.maximum(r - l, 1))[:, None]
    a, b = src[ys, np.clip(l, 0, w - 1)], src[ys, np.clip(r, 0, w - 1)]
    out[ys[use_h], xs[use_h]] = (a + (b - a) * t)[use_h]

    t = ((ys - u) / np.maximum(d - u, 1))[:, None]
    a, b = src[np.clip(u, 0, h - 1), xs], src[np.clip(d, 0, h - 1), xs]
    out[ys[use_v], xs[use_v]] = (a + (b - a) * t)[use_v]

    rest = ~(use_h | use_v)
    if rest.any():
        _, (ny, nx) = ndimage.distance_transform_edt(mask, return_indices=True)
        ry, rx = ys[rest], xs[rest]
        out[ry, rx] = src[ny[ry, rx], nx[ry, rx]]
    out = out.reshape(image.shape)
    if image.dtype == np.uint8:
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out.astype(image.dtype)


def adaptive_median(image, mask, max_window=7) -> np.ndarray:
    """Adaptive median over pixels within one pixel of ``mask``; other pixels are left as is.

    The window grows from 3x3 until its median lies strictly between its
    minimum and maximum (or ``max_window`` is reached); the pixel then takes
    that median. All windows read the unmodified input.
    """
    image = np.asarray(image)
    mask = np.asarray(mask, bool)
    if max_window < 3 or max_window % 2 == 0:
        raise ConfigError(f"max_window must be odd and >= 3, got {max_window}")
    region = ndimage.binary_dilation(mask, structure=np.ones((3, 3), bool))
    out = _channels(image).copy()
    if not region.any():
        return image.copy()
    ys, xs = np.nonzero(region)
    r = max_window // 2
    for ch in range(out.shape[2]):
        padded = np.pad(_channels(image)[..., ch], r, mode="edge")
        pending = np.ones(len(ys), bool)
        result = np.empty(len(ys), dtype=np.float64)
        for size in range(3, max_window + 1, 2):
            windows = sliding_window_view(padded, (size, size))
            off = r - size // 2
            idx = np.nonzero(pending)[0]
            if not len(idx):
                break
            win = windows[ys[idx] + off, xs[idx] + off].reshape(len(idx), size * size)
            lo, med, hi = win.min(axis=1), np.median(win, axis=1), win.max(axis=1)
            done = (lo < med) & (med < hi)
            if size == max_window:
                done[:] = True
            result[idx[done]] = med[done]
            pending[idx[done]] = False
        if image.dtype == np.uint8:
            result = np.rint(result)
        out[ys, xs, ch] = result.astype(out.dtype)
    return out.reshape(image.shape)


def remove_hairs(image, params: HairParams = HairParams()):
    """Full pipeline; returns ``(cleaned image, final hair mask)``."""
    image = np.asarray(image)
    chans = _channels(image)
    closed = np.stack([generalized_closing(chans[..., c], params.se_length) for c in range(chans.shape[2])], axis=2)
    mask = build_hair_mask(chans, closed, params.diff_threshold)
    mask = verify_structures(mask, params.min_length, params.max_mean_width)
    if not mask.any():
        return image.copy(), mask
    cleaned = inpaint_bilinear(image, mask)
    cleaned = adaptive_median(cleaned, mask, params.median_max_window)
    return cleaned, mask
