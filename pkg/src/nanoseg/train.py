"""Training loop: Adam on pixelwise cross-entropy with per-epoch logging."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .evaluation import apply_threshold, confusion
from .filters import gaussian_blur
from .models import Network, UNetSpec, build_unet, save_model
from .nnengine import Adam, cross_entropy_loss, softmax_channels
from .synth import DatasetSplit, Sample


class DivergedTrainingError(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float, log: "TrainLog | None" = None):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.log = log


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 25
    batch_size: int = 4
    blur_sigma: float = 0.0
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.blur_sigma < 0:
            raise ValueError("blur_sigma must be >= 0")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class TrainLog:
    config: TrainConfig
    seed: int
    train_loss: list[float] = field(default_factory=list)
    heldout_loss: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    steps: int = 0

    def to_csv(self, path: str | Path, include_seconds: bool = True) -> None:
        """Wall-clock seconds are the one nondeterministic column; reruns
        that need byte-comparable logs drop it."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            header = ["epoch", "train_loss", "heldout_loss"]
            if include_seconds:
                header.append("seconds")
            writer.writerow(header)
            for i, (tr, ho) in enumerate(zip(self.train_loss, self.heldout_loss)):
                row = [i + 1, repr(tr), repr(ho)]
                if include_seconds:
                    row.append(repr(self.seconds[i]))
                writer.writerow(row)


def _batch(samples: list[Sample], idx: np.ndarray, blur_sigma: float):
    imgs = []
    targets = []
    for i in idx:
        img = samples[i].image
        if blur_sigma > 0:
            img = gaussian_blur(img, blur_sigma)
        imgs.append(img)
        targets.append(samples[i].mask)
    return np.stack(imgs)[:, None], np.stack(targets).astype(np.int64)


def _mean_loss(net: Network, samples: list[Sample], batch_size: int,
               blur_sigma: float) -> float:
    total = 0.0
    count = 0
    for start in range(0, len(samples), batch_size):
        idx = np.arange(start, min(start + batch_size, len(samples)))
        x, t = _batch(samples, idx, blur_sigma)
        loss, _ = cross_entropy_loss(net.forward(x, train=False), t)
        total += loss * len(idx)
        count += len(idx)
    return total / count


def fit(net: Network, data: DatasetSplit, config: TrainConfig,
        out_dir: str | Path | None = None) -> tuple[Network, TrainLog]:
    """Train in place; returns the net and its per-epoch log.

    Inputs are blurred by ``config.blur_sigma`` before forwarding (targets
    stay sharp) and the sigma is recorded in every checkpoint so inference
    reproduces the training distribution. Non-finite loss aborts with the
    epoch and batch index; checkpoints already on disk stay.
    """
    if not data.train:
        raise ValueError("empty training split")
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    opt = Adam(net.params, lr=config.learning_rate)
    log = TrainLog(config=config, seed=config.seed)
    n = len(data.train)
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        total = 0.0
        for bi, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            x, t = _batch(data.train, idx, config.blur_sigma)
            loss, grad = cross_entropy_loss(net.forward(x, train=True), t)
            if not np.isfinite(loss):
                raise DivergedTrainingError(epoch, bi, loss, log)
            net.zero_grads()
            net.backward(grad)
            opt.step(net.grads)
            log.steps += 1
            total += loss * len(idx)
        log.train_loss.append(total / n)
        if data.test:
            log.heldout_loss.append(
                _mean_loss(net, data.test, config.batch_size, config.blur_sigma))
        else:
            log.heldout_loss.append(float("nan"))
        log.seconds.append(time.perf_counter() - t0)
        if (out_dir is not None and config.checkpoint_every
                and (epoch + 1) % config.checkpoint_every == 0
                and epoch + 1 < config.epochs):
            save_model(out_dir / f"model_epoch{epoch + 1:04d}.nseg", net,
                       blur_sigma=config.blur_sigma, adam_state=opt.state())
    if out_dir is not None:
        save_model(out_dir / "model_final.nseg", net, blur_sigma=config.blur_sigma)
        log.to_csv(out_dir / "trainlog.csv")
    return net, log


def _test_f1(net: Network, data: DatasetSplit, blur_sigma: float,
             threshold: float = 0.5, batch_size: int = 4) -> float:
    tp = fp = fn = 0
    for start in range(0, len(data.test), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data.test)))
        x, _ = _batch(data.test, idx, blur_sigma)
        prob = softmax_channels(net.forward(x, train=False))[:, 1]
        for row, i in enumerate(idx):
            m = confusion(apply_threshold(prob[row], threshold), data.test[i].mask)
            tp += m.tp
            fp += m.fp
            fn += m.fn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return 2 * precision * recall / (precision + recall) if precision + recall else 0.0


def default_grid(seed: int = 0, epochs: int = 25,
                 batch_size: int = 4) -> list[tuple[UNetSpec, TrainConfig]]:
    """Fifteen configurations: three input blurs crossed with five
    architecture/optimizer variants around the plain 3-step net."""
    grid = []
    for blur in (0.0, 1.0, 2.0):
        variants = [
            (UNetSpec(), 1e-4),
            (UNetSpec(), 1e-3),
            (UNetSpec(double_conv=True), 1e-4),
            (UNetSpec(batch_norm=True), 1e-4),
            (UNetSpec(double_conv=True, batch_norm=True), 1e-4),
        ]
        for spec, lr in variants:
            grid.append((spec, TrainConfig(learning_rate=lr, epochs=epochs,
                                           batch_size=batch_size, blur_sigma=blur,
                                           seed=seed)))
    return grid


def run_ablation_grid(data: DatasetSplit, grid: list[tuple[UNetSpec, TrainConfig]],
                      out_dir: str | Path) -> list[tuple[TrainLog, Path | None]]:
    """Train every configuration on the same split; one row per entry in
    ``comparison.csv``. A diverging entry is recorded and the grid moves on.
    """
    if not grid:
        raise ValueError("empty grid")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results: list[tuple[TrainLog, Path | None]] = []
    rows = []
    for i, (spec, config) in enumerate(grid):
        entry_dir = out_dir / f"cfg{i:02d}"
        net = build_unet(spec, seed=config.seed)
        status = "ok"
        try:
            _, log = fit(net, data, config, out_dir=entry_dir)
            ckpt: Path | None = entry_dir / "model_final.nseg"
            f1 = _test_f1(net, data, config.blur_sigma)
        except DivergedTrainingError as exc:
            log = exc.log if exc.log is not None else TrainLog(config=config, seed=config.seed)
            ckpt = None
            f1 = float("nan")
            status = f"diverged_epoch{exc.epoch}_batch{exc.batch}"
        results.append((log, ckpt))
        rows.append([
            f"cfg{i:02d}", repr(config.blur_sigma), int(spec.double_conv),
            int(spec.batch_norm), repr(config.learning_rate),
            repr(log.train_loss[-1]) if log.train_loss else "",
            repr(log.heldout_loss[-1]) if log.heldout_loss else "",
            repr(f1), status,
        ])
    with open(out_dir / "comparison.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["config_id", "blur_sigma", "double_conv", "batch_norm",
                         "learning_rate", "final_train_loss", "final_heldout_loss",
                         "f1_at_0.5", "status"])
        writer.writerows(rows)
    return results
