"""Classical image-processing primitives: blur, edges, morphology, thresholds.

These are the building blocks of the automated pseudo-label pipeline and the
reference kernels that learned filters are compared against. All convolution
and morphology use edge replication at the borders (zero padding would create
dark halos that corrupt downstream histogram statistics), and reconstruction
uses 4-connectivity.
"""
from __future__ import annotations

import csv
import math

import numpy as np
from scipy import ndimage
from skimage.morphology import reconstruction as _reconstruction

from .imgcore import as_gray_image, write_pgm, normalize

__all__ = [
    "DegenerateInputError",
    "MarkerOrderingError",
    "gaussian_kernel",
    "gaussian_blur",
    "sobel_magnitude",
    "morph",
    "reconstruct",
    "otsu_threshold",
    "gabor_kernel",
    "log_kernel",
    "reference_kernels",
    "kernel_correlation",
    "write_kernel_csv",
    "write_kernel_pgm",
]

# 4-connected structuring element used for geodesic reconstruction.
_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


class DegenerateInputError(ValueError):
    """Input has no usable variation (constant image, zero-variance kernel)."""


class MarkerOrderingError(ValueError):
    """Marker/mask ordering precondition for reconstruction is violated."""


def _gaussian_samples(sigma: float, radius: int) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_kernel(sigma: float, radius: int | None = None) -> np.ndarray:
    """Sampled 2D Gaussian kernel normalized to unit sum.

    The radius defaults to ceil(3*sigma), capturing ~99.7% of the mass.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive for a Gaussian kernel, got {sigma}")
    if radius is None:
        radius = math.ceil(3.0 * sigma)
    k1 = _gaussian_samples(sigma, radius)
    return np.outer(k1, k1)


def gaussian_blur(img, sigma: float) -> np.ndarray:
    """Blur by a normalized sampled Gaussian of radius ceil(3*sigma).

    ``sigma = 0`` is the identity. Borders are handled by edge replication.
    """
    img = as_gray_image(img)
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return img.copy()
    k1 = _gaussian_samples(sigma, math.ceil(3.0 * sigma))
    out = ndimage.correlate1d(img, k1, axis=0, mode="nearest")
    return ndimage.correlate1d(out, k1, axis=1, mode="nearest")


def sobel_magnitude(img) -> np.ndarray:
    """Gradient magnitude sqrt(Gx^2 + Gy^2) with the standard 3x3 Sobel pair.

    The output is not renormalized; a unit step produces interior responses
    of magnitude 4.
    """
    img = as_gray_image(img)
    if img.shape[0] < 3 or img.shape[1] < 3:
        raise ValueError(f"sobel_magnitude requires at least 3x3, got {img.shape}")
    gx = ndimage.sobel(img, axis=1, mode="nearest")
    gy = ndimage.sobel(img, axis=0, mode="nearest")
    return np.hypot(gx, gy)


def morph(img, op: str, radius: int) -> np.ndarray:
    """Grayscale morphology with a square structuring element of side 2r+1.

    ``open`` is erosion followed by dilation, ``close`` the reverse.
    """
    img = as_gray_image(img)
    if radius < 1:
        raise ValueError(f"morph radius must be >= 1, got {radius}")
    size = 2 * int(radius) + 1
    if op == "erode":
        return ndimage.grey_erosion(img, size=(size, size), mode="nearest")
    if op == "dilate":
        return ndimage.grey_dilation(img, size=(size, size), mode="nearest")
    if op == "open":
        eroded = ndimage.grey_erosion(img, size=(size, size), mode="nearest")
        return ndimage.grey_dilation(eroded, size=(size, size), mode="nearest")
    if op == "close":
        dilated = ndimage.grey_dilation(img, size=(size, size), mode="nearest")
        return ndimage.grey_erosion(dilated, size=(size, size), mode="nearest")
    raise ValueError(f"unknown morphology op {op!r}")


def reconstruct(marker, mask, mode: str) -> np.ndarray:
    """Morphological reconstruction of ``marker`` under/over ``mask``.

    Iterates elementary geodesic dilation (``by_dilation``, requires
    marker <= mask) or erosion (``by_erosion``, requires marker >= mask) with
    4-connectivity until a fixed point is reached.
    """
    marker = as_gray_image(marker)
    mask = as_gray_image(mask)
    if marker.shape != mask.shape:
        raise ValueError(f"marker shape {marker.shape} != mask shape {mask.shape}")
    if mode == "by_dilation":
        bad = marker > mask
        method = "dilation"
    elif mode == "by_erosion":
        bad = marker < mask
        method = "erosion"
    else:
        raise ValueError(f"unknown reconstruction mode {mode!r}")
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise MarkerOrderingError(
            f"reconstruct {mode}: marker/mask ordering violated first at "
            f"pixel (row={r}, col={c})"
        )
    return _reconstruction(marker, mask, method=method, footprint=_CROSS)


def _running_class_ss(counts: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Within-class sum of squares of bins [0..k] for every k, via the
    incremental mean/M2 update (stable where the q/w - (s/w)^2 shortcut
    cancels catastrophically). Zero-count bins are exact no-ops."""
    out = np.empty(counts.size)
    weight = mean = m2 = 0.0
    for i in range(counts.size):
        if counts[i] > 0:
            weight += counts[i]
            delta = centers[i] - mean
            mean += delta * counts[i] / weight
            m2 += counts[i] * delta * (centers[i] - mean)
        out[i] = m2
    return out


def _intra_class_variance(counts: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Total within-class sum of squares for every cut k (class 0 = bins <= k)."""
    lower = _running_class_ss(counts, centers)
    upper = _running_class_ss(counts[::-1], centers[::-1])[::-1]
    total = np.empty_like(lower)
    total[:-1] = lower[:-1] + upper[1:]
    total[-1] = lower[-1]
    return total


def otsu_threshold(img, bins: int = 256) -> float:
    """Histogram threshold minimizing intra-class variance (Otsu's method).

    Returns the center of the cut bin (the last bin assigned to the lower
    class); ties break toward the lower threshold. Raises
    ``DegenerateInputError`` on constant input.
    """
    img = as_gray_image(img)
    lo = float(img.min())
    hi = float(img.max())
    if lo == hi:
        raise DegenerateInputError("otsu_threshold needs at least 2 distinct values")
    counts, edges = np.histogram(img, bins=bins, range=(lo, hi))
    counts = counts.astype(np.float64)
    centers = (edges[:-1] + edges[1:]) / 2.0
    objective = _intra_class_variance(counts, centers)
    # A cut at the last bin leaves class 1 empty; exclude it.
    cut = int(np.argmin(objective[:-1]))
    return float(centers[cut])


def gabor_kernel(
    radius: int,
    wavelength: float,
    orientation: str,
    env_sigma: float | None = None,
) -> np.ndarray:
    """Real Gabor kernel: cosine carrier modulated by a Gaussian envelope.

    ``horizontal`` orients the stripes horizontally (carrier varies along y);
    ``vertical`` is its transpose. The envelope sigma defaults to radius/2.
    """
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    if wavelength <= 0:
        raise ValueError(f"wavelength must be positive, got {wavelength}")
    if env_sigma is None:
        env_sigma = radius / 2.0
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    y, x = np.meshgrid(ax, ax, indexing="ij")
    envelope = np.exp(-(x * x + y * y) / (2.0 * env_sigma * env_sigma))
    if orientation == "horizontal":
        carrier = np.cos(2.0 * np.pi * y / wavelength)
    elif orientation == "vertical":
        carrier = np.cos(2.0 * np.pi * x / wavelength)
    else:
        raise ValueError(f"orientation must be 'horizontal' or 'vertical', got {orientation!r}")
    return envelope * carrier


def log_kernel(radius: int, sigma: float) -> np.ndarray:
    """Sampled Laplacian-of-Gaussian kernel, DC-corrected to zero sum."""
    if radius < 1:
        raise ValueError(f"radius must be >= 1, got {radius}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    y, x = np.meshgrid(ax, ax, indexing="ij")
    rho2 = x * x + y * y
    k = (rho2 - 2.0 * sigma * sigma) / sigma**4 * np.exp(-rho2 / (2.0 * sigma * sigma))
    return k - k.mean()


def reference_kernels(radius: int) -> dict[str, np.ndarray]:
    """Reference kernels, at a common size, that learned filters are scored against.

    ``gabor_pair`` is the sum of a horizontal and a vertical Gabor; adding the
    Gaussian to it reproduces the composite pattern single-layer models tend
    to learn.
    """
    sigma = radius / 2.0
    return {
        "gaussian": gaussian_kernel(sigma, radius=radius),
        "log": log_kernel(radius, sigma),
        "gabor_pair": gabor_kernel(radius, float(radius), "horizontal")
        + gabor_kernel(radius, float(radius), "vertical"),
    }


def kernel_correlation(a, b) -> float:
    """Pearson correlation of two equally-sized kernels, flattened."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"kernel shapes differ: {a.shape} vs {b.shape}")
    da = a.ravel() - a.mean()
    db = b.ravel() - b.mean()
    na = np.sqrt(np.dot(da, da))
    nb = np.sqrt(np.dot(db, db))
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("kernel_correlation on a zero-variance kernel")
    return float(np.dot(da, db) / (na * nb))


def write_kernel_csv(kernel, path) -> None:
    """Export a kernel as CSV, one row per kernel row, full double precision."""
    kernel = np.asarray(kernel, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in kernel:
            writer.writerow([repr(float(v)) for v in row])


def write_kernel_pgm(kernel, path) -> None:
    """Export a kernel as a min-max normalized 8-bit PGM for visualization."""
    write_pgm(normalize(np.asarray(kernel, dtype=np.float64)), path, bit_depth=8)
