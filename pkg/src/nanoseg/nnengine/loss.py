"""Pixelwise cross-entropy on raw logits (log-softmax applied internally)."""
from __future__ import annotations

import numpy as np

from .layers import _as_tensor, softmax_channels


def cross_entropy_loss(logits: np.ndarray, targets: np.ndarray):
    """Mean over all pixels of -log softmax(logits)[target class].

    ``targets`` holds per-pixel class indices (a boolean mask reads as
    background=0 / particle=1). Returns ``(loss, grad_logits)`` where the
    gradient is (softmax - onehot) / pixel count, so downstream backward
    passes receive d(loss)/d(logits) directly.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets)
    if targets.dtype == bool:
        targets = targets.astype(np.int64)
    n, c, h, w = logits.shape
    if targets.shape != (n, h, w):
        raise ValueError(f"target shape {targets.shape} does not match logits {logits.shape}")
    if targets.min() < 0 or targets.max() >= c:
        raise ValueError(f"target classes must lie in [0, {c})")

    shifted = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1)) + logits.max(axis=1)
    picked = np.take_along_axis(logits, targets[:, None], axis=1)[:, 0]
    count = n * h * w
    loss = float((logsumexp - picked).sum() / count)

    grad = softmax_channels(logits)
    grad -= targets[:, None] == np.arange(c)[None, :, None, None]
    return loss, grad / count
