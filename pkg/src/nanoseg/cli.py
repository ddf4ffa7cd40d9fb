"""Command-line interface: synth, label, train, infer, eval, kernels.

Every subcommand owns its output directory for the duration of the run
(lockfile), echoes the fully resolved configuration next to its outputs,
and emits only PGM/CSV/JSON (plus optional SVG charts), so a run can be
reproduced byte-for-byte from the echo alone.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np

from . import evaluation, filters, particles
from .imgcore import read_pgm, write_mask, write_pgm
from .models import (
    ShallowSpec,
    UNetSpec,
    build_shallow,
    build_unet,
    export_kernels,
    load_model,
)
from .pseudolabel import PseudoLabelParams, generate_label, overlay
from .synth import PlacementError, SynthConfig, load_dataset, make_dataset, save_dataset
from .train import (
    DivergedTrainingError,
    TrainConfig,
    default_grid,
    fit,
    run_ablation_grid,
)


class CliError(Exception):
    """User-facing failure: printed without a traceback, exit code 1."""


# ---------------------------------------------------------------------------
# Config plumbing

_SECTION_TYPES = {
    "synth": SynthConfig,
    "label": PseudoLabelParams,
    "train": TrainConfig,
}


def _build_section(name: str, cls, data: dict):
    known = {f.name for f in dataclass_fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise CliError(f"config section {name!r}: unknown keys {sorted(unknown)}")
    coerced = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    try:
        return cls(**coerced)
    except (TypeError, ValueError) as exc:
        raise CliError(f"config section {name!r}: {exc}") from exc


def _build_model_spec(data: dict):
    kind = data.get("kind", "unet")
    rest = {k: v for k, v in data.items() if k != "kind"}
    cls = {"unet": UNetSpec, "shallow": ShallowSpec}.get(kind)
    if cls is None:
        raise CliError(f"config section 'model': unknown kind {kind!r}")
    return _build_section("model", cls, rest)


class RunConfig:
    """Resolved per-run settings, assembled from defaults plus --config."""

    SECTIONS = ("synth", "label", "model", "train", "eval")

    def __init__(self, doc: dict | None = None):
        doc = doc or {}
        unknown = set(doc) - set(self.SECTIONS)
        if unknown:
            raise CliError(f"config: unknown sections {sorted(unknown)}")
        for key in self.SECTIONS:
            section = doc.get(key, {})
            if not isinstance(section, dict):
                raise CliError(f"config section {key!r} must be an object")
        self.synth = _build_section("synth", SynthConfig, doc.get("synth", {}))
        self.label = _build_section("label", PseudoLabelParams, doc.get("label", {}))
        self.model = _build_model_spec(doc.get("model", {}))
        self.train = _build_section("train", TrainConfig, doc.get("train", {}))
        eval_section = doc.get("eval", {})
        unknown = set(eval_section) - {"thresholds"}
        if unknown:
            raise CliError(f"config section 'eval': unknown keys {sorted(unknown)}")
        self.thresholds = [float(t) for t in eval_section.get(
            "thresholds", evaluation.DEFAULT_THRESHOLDS)]

    def to_json(self) -> dict:
        def plain(obj):
            return {k: list(v) if isinstance(v, tuple) else v
                    for k, v in dataclasses.asdict(obj).items()}

        return {
            "synth": plain(self.synth),
            "label": plain(self.label),
            "model": self.model.to_json(),
            "train": plain(self.train),
            "eval": {"thresholds": self.thresholds},
        }

    @classmethod
    def from_file(cls, path: str | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise CliError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise CliError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise CliError(f"config {path}: top level must be an object")
        return cls(doc)


def _echo_config(out_dir: Path, command: str, config: RunConfig, **run_args) -> None:
    doc = {"command": command, "run": run_args, "sections": config.to_json()}
    with open(out_dir / "resolved_config.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


class _DirLock:
    """One invocation per output directory; a leftover lock names its owner."""

    def __init__(self, out_dir: Path):
        self.path = out_dir / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise CliError(
                f"{self.path} exists: directory in use by another run "
                "(remove the lockfile if that run is gone)") from None
        with os.fdopen(fd, "w") as fh:
            fh.write(f"{os.getpid()}\n")
        return self

    def __exit__(self, *exc_info):
        self.path.unlink(missing_ok=True)


def _prepare_out(path: str) -> Path:
    out_dir = Path(path)
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def _input_images(in_dir: Path) -> list[Path]:
    if not in_dir.is_dir():
        raise CliError(f"{in_dir} is not a directory")
    skip = ("_mask", "_overlay", "_softmax")
    paths = sorted(p for p in in_dir.glob("*.pgm")
                   if not p.stem.endswith(skip))
    if not paths:
        raise CliError(f"no input images in {in_dir}")
    return paths


# ---------------------------------------------------------------------------
# SVG charts (optional --plot output; static line charts only)

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2")


def write_line_svg(path: Path, series: dict[str, tuple[list[float], list[float]]],
                   xlabel: str, ylabel: str) -> None:
    width, height, margin = 640, 400, 54
    xs_all = [x for xs, _ in series.values() for x in xs]
    ys_all = [y for _, ys in series.values() for y in ys if np.isfinite(y)]
    if not xs_all or not ys_all:
        raise ValueError("nothing to plot")
    x0, x1 = min(xs_all), max(xs_all)
    y0, y1 = min(ys_all), max(ys_all)
    xspan = (x1 - x0) or 1.0
    yspan = (y1 - y0) or 1.0

    def px(x):
        return margin + (x - x0) / xspan * (width - 2 * margin)

    def py(y):
        return height - margin - (y - y0) / yspan * (height - 2 * margin)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
             f'y2="{height - margin}" stroke="black"/>',
             f'<line x1="{margin}" y1="{margin}" x2="{margin}" '
             f'y2="{height - margin}" stroke="black"/>']
    for i, (name, (xs, ys)) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(xs, ys)
                       if np.isfinite(y))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     'stroke-width="1.5"/>')
        parts.append(f'<text x="{width - margin + 4}" y="{margin + 14 * i + 10}" '
                     f'font-size="11" fill="{color}">{name}</text>')
    parts.append(f'<text x="{width // 2}" y="{height - 12}" font-size="12" '
                 f'text-anchor="middle">{xlabel}</text>')
    parts.append(f'<text x="14" y="{height // 2}" font-size="12" text-anchor="middle" '
                 f'transform="rotate(-90 14 {height // 2})">{ylabel}</text>')
    for value, anchor, x, y in ((x0, "start", margin, height - margin + 14),
                                (x1, "end", width - margin, height - margin + 14)):
        parts.append(f'<text x="{x}" y="{y}" font-size="10" '
                     f'text-anchor="{anchor}">{value:g}</text>')
    for value, y in ((y0, height - margin), (y1, margin)):
        parts.append(f'<text x="{margin - 4}" y="{y + 3}" font-size="10" '
                     f'text-anchor="end">{value:g}</text>')
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")


# ---------------------------------------------------------------------------
# Subcommands

def cmd_synth(args, config: RunConfig) -> int:
    out_dir = _prepare_out(args.out)
    seed = 0 if args.seed is None else args.seed
    with _DirLock(out_dir):
        try:
            data = make_dataset(config.synth, args.n, split_seed=seed)
        except PlacementError as exc:
            raise CliError(str(exc)) from exc
        save_dataset(data, config.synth, out_dir)
        _echo_config(out_dir, "synth", config, n=args.n, seed=seed)
        print(f"wrote {args.n} samples to {out_dir}")
    return 0


def cmd_label(args, config: RunConfig) -> int:
    out_dir = _prepare_out(args.out)
    paths = _input_images(Path(args.in_dir))
    failures = 0
    with _DirLock(out_dir):
        def one(path: Path):
            img = read_pgm(path)
            mask = generate_label(img, config.label)
            return img, mask

        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            outcomes = list(pool.map(lambda p: _try(one, p), paths))
        rows = []
        for path, outcome in zip(paths, outcomes):
            if isinstance(outcome, Exception):
                print(f"error: {path.name}: {outcome}", file=sys.stderr)
                failures += 1
                continue
            img, mask = outcome
            write_mask(mask, out_dir / f"{path.stem}_mask.pgm")
            write_pgm(overlay(img, mask), out_dir / f"{path.stem}_overlay.pgm")
            n_components = int(particles.connected_components(mask).max())
            rows.append([path.name, repr(float(mask.mean())), n_components])
        with open(out_dir / "manifest.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["filename", "particle_fraction", "component_count"])
            writer.writerows(rows)
        _echo_config(out_dir, "label", config, in_dir=str(args.in_dir),
                     threads=args.threads)
        print(f"labelled {len(rows)}/{len(paths)} images into {out_dir}")
    return 1 if failures else 0


def _try(fn, *fn_args):
    try:
        return fn(*fn_args)
    except Exception as exc:
        return exc


def _load_grid(path: str, base: TrainConfig):
    if path == "default":
        return default_grid(seed=base.seed, epochs=base.epochs,
                            batch_size=base.batch_size)
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read grid file {path}: {exc}") from exc
    if not isinstance(doc, list) or not doc:
        raise CliError(f"grid file {path}: expected a non-empty JSON list")
    grid = []
    for i, entry in enumerate(doc):
        if not isinstance(entry, dict) or set(entry) - {"model", "train"}:
            raise CliError(f"grid entry {i}: expected keys 'model' and 'train'")
        spec = _build_model_spec(entry.get("model", {}))
        if not isinstance(spec, UNetSpec):
            raise CliError(f"grid entry {i}: the ablation grid runs unet models")
        grid.append((spec, _build_section("train", TrainConfig, entry.get("train", {}))))
    return grid


def cmd_train(args, config: RunConfig) -> int:
    out_dir = _prepare_out(args.out)
    data, _ = load_dataset(args.dataset)
    with _DirLock(out_dir):
        if args.grid:
            grid = _load_grid(args.grid, config.train)
            run_ablation_grid(data, grid, out_dir)
            _echo_config(out_dir, "train", config, dataset=str(args.dataset),
                         grid=args.grid)
            print(f"grid of {len(grid)} configurations done; see {out_dir}/comparison.csv")
            return 0
        spec = config.model
        net = (build_unet(spec, seed=config.train.seed) if isinstance(spec, UNetSpec)
               else build_shallow(spec, seed=config.train.seed))
        _echo_config(out_dir, "train", config, dataset=str(args.dataset), grid=None)
        try:
            _, log = fit(net, data, config.train, out_dir=out_dir)
        except DivergedTrainingError as exc:
            if exc.log is not None:
                exc.log.to_csv(out_dir / "trainlog.csv")
            raise CliError(f"training diverged: {exc}") from exc
        if args.plot:
            epochs = list(range(1, len(log.train_loss) + 1))
            write_line_svg(out_dir / "loss.svg",
                           {"train": (epochs, log.train_loss),
                            "heldout": (epochs, log.heldout_loss)},
                           "epoch", "cross-entropy loss")
        print(f"trained {log.steps} steps; final loss {log.train_loss[-1]:.4f}; "
              f"checkpoint {out_dir / 'model_final.nseg'}")
    return 0


def _infer_prob(net, meta: dict, img: np.ndarray, blur_override: float | None):
    sigma = meta.get("blur_sigma", 0.0) if blur_override is None else blur_override
    if sigma > 0:
        img = filters.gaussian_blur(img, sigma)
    logits = net.forward(img[None, None], train=False)
    from .nnengine import softmax_channels
    return softmax_channels(logits)[0, 1]


def _particle_csv(path: Path, records) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "area", "centroid_x", "centroid_y",
                         "equivalent_diameter", "bbox_x0", "bbox_y0",
                         "bbox_x1", "bbox_y1"])
        for r in records:
            writer.writerow([r.id, r.area, repr(r.centroid[0]), repr(r.centroid[1]),
                             repr(r.equivalent_diameter), *r.bbox])


def _write_segmentation(out_dir: Path, path: Path, prob: np.ndarray,
                        threshold, rows: list) -> None:
    t = (evaluation.otsu_on_activation(prob) if threshold == "otsu"
         else float(threshold))
    mask = evaluation.apply_threshold(prob, t)
    write_pgm(prob, out_dir / f"{path.stem}_softmax.pgm")
    write_mask(mask, out_dir / f"{path.stem}_mask.pgm")
    records = particles.measure(particles.connected_components(mask))
    _particle_csv(out_dir / f"{path.stem}_particles.csv", records)
    rows.append([path.name, repr(float(t)), len(records)])


def cmd_infer(args, config: RunConfig) -> int:
    out_dir = _prepare_out(args.out)
    if args.threshold != "otsu":
        try:
            fixed_t = float(args.threshold)
        except ValueError:
            raise CliError(f"threshold must be a number or 'otsu', got {args.threshold!r}")
        if not 0.0 <= fixed_t <= 1.0:
            raise CliError(f"threshold {fixed_t} outside [0, 1]")
    net, meta = load_model(args.checkpoint)
    paths = _input_images(Path(args.in_dir))
    failures = 0
    with _DirLock(out_dir):
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            probs = list(pool.map(
                lambda p: _try(lambda: _infer_prob(net, meta, read_pgm(p),
                                                   args.blur_override)), paths))
        rows = []
        for path, prob in zip(paths, probs):
            if not isinstance(prob, Exception):
                prob = _try(_write_segmentation, out_dir, path, prob,
                            args.threshold if args.threshold == "otsu" else fixed_t,
                            rows)
            if isinstance(prob, Exception):
                print(f"error: {path.name}: {prob}", file=sys.stderr)
                failures += 1
        with open(out_dir / "manifest.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["filename", "threshold", "particle_count"])
            writer.writerows(rows)
        _echo_config(out_dir, "infer", config, checkpoint=str(args.checkpoint),
                     in_dir=str(args.in_dir), threshold=args.threshold,
                     blur_override=args.blur_override, threads=args.threads)
        print(f"segmented {len(rows)}/{len(paths)} images into {out_dir}")
    return 1 if failures else 0


def cmd_eval(args, config: RunConfig) -> int:
    out_dir = _prepare_out(args.out)
    data, _ = load_dataset(args.dataset)
    samples = {"all": data.train + data.test, "train": data.train,
               "test": data.test}[args.split]
    if not samples:
        raise CliError(f"dataset split {args.split!r} is empty")
    net, meta = load_model(args.checkpoint)
    thresholds = ([float(t) for t in args.thresholds.split(",")]
                  if args.thresholds else config.thresholds)
    with _DirLock(out_dir):
        probs = [_infer_prob(net, meta, s.image, args.blur_override) for s in samples]
        truths = [s.mask for s in samples]
        result = evaluation.sweep(probs, truths, thresholds)
        evaluation.write_sweep_csv(out_dir / "sweep.csv", result)
        best = max(range(len(thresholds)), key=lambda i: result.metrics[i].f1)
        summary = (f"best_f1={result.metrics[best].f1!r} "
                   f"at threshold={thresholds[best]!r} "
                   f"over {len(samples)} images ({args.split})")
        (out_dir / "summary.txt").write_text(summary + "\n")
        if args.plot:
            write_line_svg(out_dir / "sweep.svg",
                           {"f1": (thresholds, [m.f1 for m in result.metrics]),
                            "precision": (thresholds, [m.precision for m in result.metrics]),
                            "recall": (thresholds, [m.recall for m in result.metrics])},
                           "threshold", "score")
        _echo_config(out_dir, "eval", config, checkpoint=str(args.checkpoint),
                     dataset=str(args.dataset), thresholds=thresholds,
                     split=args.split, blur_override=args.blur_override)
        print(summary)
    return 0


def cmd_kernels(args, config: RunConfig) -> int:
    out_dir = _prepare_out(args.out)
    net, _ = load_model(args.checkpoint)
    try:
        kernels, mean = export_kernels(net, first_layer_only=args.first_layer)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    refs = filters.reference_kernels(kernels[0].shape[0] // 2)
    with _DirLock(out_dir):
        named = [(f"kernel_{i:02d}", k) for i, k in enumerate(kernels)]
        if len(kernels) > 1:
            named.append(("kernel_mean", mean))
        for name, k in named:
            filters.write_kernel_csv(k, out_dir / f"{name}.csv")
            filters.write_kernel_pgm(k, out_dir / f"{name}.pgm")
        with open(out_dir / "correlations.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["kernel", *sorted(refs)])
            for name, k in named:
                row = [name]
                for ref_name in sorted(refs):
                    try:
                        value = repr(filters.kernel_correlation(k, refs[ref_name]))
                    except filters.DegenerateInputError:
                        value = ""
                    row.append(value)
                writer.writerow(row)
        _echo_config(out_dir, "kernels", config, checkpoint=str(args.checkpoint),
                     first_layer=args.first_layer)
        print(f"exported {len(kernels)} kernels to {out_dir}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nanoseg",
        description="Segment supported nanoparticles in grayscale micrographs: "
                    "synthetic data, classical pseudo-labels, trainable CNNs, "
                    "threshold evaluation and particle measurement.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None,
                       help="override the configured RNG seed")
        p.add_argument("--threads", type=int, default=1,
                       help="worker threads for per-image stages")
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--n", type=int, default=10, help="number of samples")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("label", help="pseudo-label a directory of PGM images")
    common(p)
    p.add_argument("in_dir", help="directory of input .pgm images")
    p.set_defaults(fn=cmd_label)

    p = sub.add_parser("train", help="train a segmentation model")
    common(p)
    p.add_argument("dataset", help="dataset directory (from synth)")
    p.add_argument("--grid", help="JSON grid file, or 'default' for the "
                                  "built-in 15-configuration ablation")
    p.add_argument("--plot", action="store_true", help="write loss.svg")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="segment images with a checkpoint")
    common(p)
    p.add_argument("checkpoint")
    p.add_argument("in_dir")
    p.add_argument("--threshold", default="0.5",
                   help="probability cut in [0,1], or 'otsu' (default 0.5)")
    p.add_argument("--blur-override", type=float, default=None,
                   help="replace the checkpoint's stored input blur sigma")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="threshold sweep against dataset masks")
    common(p)
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--thresholds", help="comma-separated ascending list")
    p.add_argument("--split", choices=("all", "train", "test"), default="all")
    p.add_argument("--blur-override", type=float, default=None)
    p.add_argument("--plot", action="store_true", help="write sweep.svg")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("kernels", help="export learned filters plus "
                                       "correlations against reference kernels")
    common(p)
    p.add_argument("checkpoint")
    p.add_argument("--first-layer", action="store_true",
                   help="allow deep checkpoints by exporting only the first layer")
    p.set_defaults(fn=cmd_kernels)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = RunConfig.from_file(args.config)
        if args.seed is not None:
            config.train = dataclasses.replace(config.train, seed=args.seed)
        return args.fn(args, config)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
