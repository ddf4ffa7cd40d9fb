"""Automatic mask generation from raw micrographs via classical filtering.

The pipeline assumes one particle polarity (bright after optional
inversion), estimates a smooth background by morphological reconstruction
and thresholds the residue. No learned components; its outputs serve as
training targets for the networks.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .filters import gaussian_blur, morph, otsu_threshold, reconstruct, sobel_magnitude
from .imgcore import as_gray_image, as_mask, normalize
from .particles import connected_components

MIN_SIDE = 32


@dataclass(frozen=True)
class PseudoLabelParams:
    blur_sigma: float = 2.0
    marker_offset: float = 0.1
    morph_radius: int = 2
    invert: bool = True
    min_area: int = 9
    use_sobel: bool = False

    def __post_init__(self):
        if self.blur_sigma < 0:
            raise ValueError("blur_sigma must be >= 0")
        if not 0 < self.marker_offset < 1:
            raise ValueError("marker_offset must lie in (0, 1)")
        if self.morph_radius < 1:
            raise ValueError("morph_radius must be >= 1")
        if self.min_area < 0:
            raise ValueError("min_area must be >= 0")


def generate_label(img: np.ndarray, params: PseudoLabelParams = PseudoLabelParams()) -> np.ndarray:
    """Binary particle mask from a raw image, deterministic in its inputs.

    Order: normalize, flip polarity if requested, blur, bracket the blurred
    image between reconstruction-by-dilation (background floor) and
    reconstruction-by-erosion (ceiling), threshold the residue, open, and
    drop small components.
    """
    img = as_gray_image(img)
    if min(img.shape) < MIN_SIDE:
        raise ValueError(f"image {img.shape} smaller than {MIN_SIDE}x{MIN_SIDE}")
    x = normalize(img)
    if params.invert:
        x = 1.0 - x
    blurred = gaussian_blur(x, params.blur_sigma)
    floor = reconstruct(_offset_marker(blurred, -params.marker_offset), blurred,
                        mode="by_dilation")
    ceiling = reconstruct(_offset_marker(blurred, params.marker_offset), blurred,
                          mode="by_erosion")
    residue = ceiling - floor
    if params.use_sobel:
        residue = residue * normalize(sobel_magnitude(blurred))
    mask = residue > otsu_threshold(residue)
    mask = morph(mask.astype(np.float64), "open", params.morph_radius) > 0.5
    return _drop_small(mask, params.min_area)


def _offset_marker(img: np.ndarray, offset: float) -> np.ndarray:
    """Shift by the offset (clamped to [0, 1]), keeping the original values
    on the 1-pixel border.

    The border seed lets flat terrain drain through the frame, so the
    reconstruction bracket flattens only enclosed structures. A globally
    shifted marker would instead flood every plateau by the full offset and
    the two sides of the bracket would cancel into a constant.
    """
    marker = np.clip(img + offset, 0.0, 1.0)
    marker[0, :] = img[0, :]
    marker[-1, :] = img[-1, :]
    marker[:, 0] = img[:, 0]
    marker[:, -1] = img[:, -1]
    return marker


def _drop_small(mask: np.ndarray, min_area: int) -> np.ndarray:
    if min_area <= 1 or not mask.any():
        return mask
    labels = connected_components(mask, connectivity=8)
    areas = np.bincount(labels.ravel())
    keep = areas >= min_area
    keep[0] = False
    return keep[labels]


def overlay(img: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Brighten masked pixels by a fixed visible offset for visual QA."""
    img = as_gray_image(img)
    mask = as_mask(mask)
    if img.shape != mask.shape:
        raise ValueError(f"image {img.shape} vs mask {mask.shape}")
    out = img.copy()
    out[mask] = np.minimum(out[mask] + 0.35, 1.0)
    return out


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union; two empty masks count as identical (1.0)."""
    a = as_mask(a)
    b = as_mask(b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union
