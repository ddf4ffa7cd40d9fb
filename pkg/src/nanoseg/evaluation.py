"""Pixelwise evaluation of predicted particle maps against reference masks."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .filters import otsu_threshold
from .imgcore import as_gray_image, as_mask, normalize, write_pgm
from .nnengine import softmax_channels


@dataclass(frozen=True)
class PixelMetrics:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int, tn: int) -> "PixelMetrics":
        # Zero-denominator convention: empty predictions or empty truth
        # score 0, keeping F1 defined everywhere on a sweep.
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        return cls(int(tp), int(fp), int(fn), int(tn), precision, recall, f1)


@dataclass(frozen=True)
class ThresholdSweep:
    thresholds: tuple[float, ...]
    metrics: tuple[PixelMetrics, ...]


def confusion(pred: np.ndarray, truth: np.ndarray) -> PixelMetrics:
    """Pixel counts with particle (True) as the positive class."""
    pred = as_mask(pred)
    truth = as_mask(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {truth.shape}")
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    tn = pred.size - tp - fp - fn
    return PixelMetrics.from_counts(tp, fp, fn, tn)


def apply_threshold(prob: np.ndarray, t: float) -> np.ndarray:
    """Strict cut: pixels with probability > t. t=1 gives the empty mask."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"threshold {t} outside [0, 1]")
    return as_gray_image(prob) > t


def _as_pairs(prob, truth) -> list[tuple[np.ndarray, np.ndarray]]:
    if isinstance(prob, np.ndarray) and prob.ndim == 2:
        prob, truth = [prob], [truth]
    probs = [as_gray_image(p) for p in prob]
    truths = [as_mask(t) for t in truth]
    if len(probs) != len(truths):
        raise ValueError(f"{len(probs)} probability maps vs {len(truths)} masks")
    for p, t in zip(probs, truths):
        if p.shape != t.shape:
            raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    return list(zip(probs, truths))


def sweep(prob, truth, thresholds: Sequence[float]) -> ThresholdSweep:
    """Confusion at each threshold, pixels pooled over the whole set.

    Accepts one (prob, truth) pair or parallel sequences of them.
    """
    thresholds = [float(t) for t in thresholds]
    if not thresholds:
        raise ValueError("no thresholds given")
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be strictly ascending")
    pairs = _as_pairs(prob, truth)
    metrics = []
    for t in thresholds:
        tp = fp = fn = tn = 0
        for p, truth_mask in pairs:
            pred = apply_threshold(p, t)
            tp += int(np.count_nonzero(pred & truth_mask))
            fp += int(np.count_nonzero(pred & ~truth_mask))
            fn += int(np.count_nonzero(~pred & truth_mask))
            tn += int(np.count_nonzero(~pred & ~truth_mask))
        metrics.append(PixelMetrics.from_counts(tp, fp, fn, tn))
    return ThresholdSweep(tuple(thresholds), tuple(metrics))


DEFAULT_THRESHOLDS = tuple(round(0.05 * i, 2) for i in range(1, 20))


def write_sweep_csv(path: str | Path, result: ThresholdSweep) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "tp", "fp", "fn", "tn", "precision", "recall", "f1"])
        for t, m in zip(result.thresholds, result.metrics):
            writer.writerow([repr(t), m.tp, m.fp, m.fn, m.tn,
                             repr(m.precision), repr(m.recall), repr(m.f1)])


def otsu_on_activation(prob: np.ndarray) -> float:
    """Data-driven cut on a softmax map, for threshold-free segmentation."""
    return otsu_threshold(as_gray_image(prob))


def line_profile(img: np.ndarray, p0: tuple[float, float], p1: tuple[float, float],
                 samples: int) -> np.ndarray:
    """Bilinear samples at evenly spaced points from p0 to p1 inclusive.

    Points are (x, y) with x along columns; both endpoints must lie inside
    the image.
    """
    img = as_gray_image(img)
    if samples < 2:
        raise ValueError("need at least 2 samples")
    h, w = img.shape
    for name, (x, y) in (("p0", p0), ("p1", p1)):
        if not (0 <= x <= w - 1 and 0 <= y <= h - 1):
            raise ValueError(f"{name}=({x}, {y}) outside image of size {w}x{h}")
    frac = np.linspace(0.0, 1.0, samples)
    xs = p0[0] + frac * (p1[0] - p0[0])
    ys = p0[1] + frac * (p1[1] - p0[1])
    x0 = np.clip(np.floor(xs).astype(int), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(ys).astype(int), 0, max(h - 2, 0))
    fx = xs - x0
    fy = ys - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def write_profile_csv(path: str | Path, s: Sequence[float],
                      columns: dict[str, Sequence[float]]) -> None:
    """Arc position plus one value column per source image."""
    lengths = {name: len(vals) for name, vals in columns.items()}
    if any(n != len(s) for n in lengths.values()):
        raise ValueError(f"column lengths {lengths} do not match {len(s)} positions")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["s", *columns])
        for i, pos in enumerate(s):
            writer.writerow([repr(float(pos)), *(repr(float(columns[c][i])) for c in columns)])


def export_activations(net, img: np.ndarray):
    """Raw per-class logit maps plus the particle-channel softmax."""
    img = as_gray_image(img)
    logits = net.forward(img[None, None], train=False)
    prob = softmax_channels(logits)
    return logits[0, 0].copy(), logits[0, 1].copy(), prob[0, 1].copy()


def save_activation_maps(out_dir: str | Path, stem: str, background: np.ndarray,
                         particle: np.ndarray, softmax_map: np.ndarray) -> None:
    """PGMs are range-normalized; the sidecar JSON records the raw ranges."""
    out_dir = Path(out_dir)
    scales = {}
    for name, arr in (("background", background), ("particle", particle)):
        scales[name] = {"min": float(arr.min()), "max": float(arr.max())}
        write_pgm(normalize(arr), out_dir / f"{stem}_{name}.pgm")
    write_pgm(np.clip(softmax_map, 0.0, 1.0), out_dir / f"{stem}_softmax.pgm")
    with open(out_dir / f"{stem}_scales.json", "w") as fh:
        json.dump(scales, fh, indent=2, sort_keys=True)
        fh.write("\n")
