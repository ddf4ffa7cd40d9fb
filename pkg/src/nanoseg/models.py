"""Segmentation network builders: encoder-decoder nets and shallow baselines.

All nets map (n, 1, h, w) images to (n, 2, h, w) class logits. Construction
is deterministic given (spec, seed). Checkpoints are self-contained: the
architecture travels with the weights as scalar ``meta.*`` records, so a
saved model can be rebuilt without the original spec object.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .nnengine import (
    BatchNorm2d,
    Conv2d,
    Layer,
    LeakyReLU,
    MaxPool2,
    ReLU,
    Upsample2,
    concat_channels,
    load_tensors,
    save_tensors,
    split_channels_grad,
)
from .nnengine.checkpoint import CheckpointFormatError

ACTIVATIONS = ("relu", "leaky_relu")
SHALLOW_VARIANTS = ("single_filter", "wide32")

# Checkpoint meta records hold only float64 scalars, so enumerated spec
# fields travel as integer codes.
_KIND_CODES = {"unet": 0, "shallow": 1}
_ACT_CODES = {name: i for i, name in enumerate(ACTIVATIONS)}
_VARIANT_CODES = {name: i for i, name in enumerate(SHALLOW_VARIANTS)}
META_FORMAT_VERSION = 1


def _decode(codes: dict[str, int], value: float, what: str) -> str:
    for name, code in codes.items():
        if code == int(value):
            return name
    raise CheckpointFormatError(f"unknown {what} code {value!r}")


@dataclass(frozen=True)
class UNetSpec:
    steps: int = 3
    base_channels: int = 8
    kernel_size: int = 3
    double_conv: bool = False
    batch_norm: bool = False
    activation: str = "relu"

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd and positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    def to_json(self) -> dict:
        return {"kind": "unet", **asdict(self)}


@dataclass(frozen=True)
class ShallowSpec:
    variant: str = "single_filter"
    kernel_size: int = 9

    def __post_init__(self):
        if self.variant not in SHALLOW_VARIANTS:
            raise ValueError(f"variant must be one of {SHALLOW_VARIANTS}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd and positive")

    def to_json(self) -> dict:
        return {"kind": "shallow", **asdict(self)}


def spec_from_json(data: dict) -> UNetSpec | ShallowSpec:
    kind = data.get("kind")
    fields = {k: v for k, v in data.items() if k != "kind"}
    if kind == "unet":
        return UNetSpec(**fields)
    if kind == "shallow":
        return ShallowSpec(**fields)
    raise ValueError(f"unknown architecture kind {kind!r}")


class FixedSignHead(Layer):
    """Maps one channel z to the fixed logit pair (z, -z); nothing learnable."""

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.shape[1] != 1:
            raise ValueError(f"expected a single channel, got {x.shape[1]}")
        return np.concatenate([x, -x], axis=1)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return grad[:, :1] - grad[:, 1:]


class Network:
    """Base for nets with named layers; names key checkpoint records."""

    kind = ""

    def __init__(self, spec):
        self.spec = spec
        self._named: list[tuple[str, Layer]] = []

    def _add(self, name: str, layer: Layer) -> Layer:
        self._named.append((name, layer))
        return layer

    def named_layers(self) -> list[tuple[str, Layer]]:
        return list(self._named)

    @property
    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self._named:
            for key, arr in layer.params.items():
                out[f"{name}.{key}"] = arr
        return out

    @property
    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self._named:
            for key, arr in layer.grads.items():
                out[f"{name}.{key}"] = arr
        return out

    @property
    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self._named:
            for key, arr in layer.buffers.items():
                if arr is not None:
                    out[f"{name}.{key}"] = arr
        return out

    def zero_grads(self) -> None:
        for _, layer in self._named:
            layer.zero_grads()

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def load_state(self, records: dict[str, np.ndarray]) -> None:
        """Overwrite parameters (and any present buffers) from checkpoint records."""
        params = self.params
        missing = set(params) - set(records)
        if missing:
            raise CheckpointFormatError(f"checkpoint lacks parameters {sorted(missing)}")
        for name, arr in params.items():
            value = records[name]
            if value.shape != arr.shape:
                raise CheckpointFormatError(
                    f"record {name!r} has shape {value.shape}, expected {arr.shape}")
            arr[...] = value
        buffer_owners = {}
        for lname, layer in self._named:
            for key in layer.buffers:
                buffer_owners[f"{lname}.{key}"] = (layer, key)
        for name, (layer, key) in buffer_owners.items():
            if name in records:
                layer.buffers[key] = records[name].copy()
        known = set(params) | set(buffer_owners)
        extra = [n for n in records
                 if n not in known and not n.startswith(("meta.", "adam."))]
        if extra:
            raise CheckpointFormatError(f"checkpoint has unknown records {sorted(extra)}")


class ChainNetwork(Network):
    """Plain layer sequence (the shallow baselines)."""

    kind = "shallow"

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        for _, layer in self._named:
            x = layer.forward(x, train=train)
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for _, layer in reversed(self._named):
            grad = layer.backward(grad)
        return grad


class UNet(Network):
    """Encoder-decoder with channel-concat skips at matching resolutions."""

    kind = "unet"

    def __init__(self, spec: UNetSpec, seed: int):
        super().__init__(spec)
        rng = np.random.default_rng(seed)
        k = spec.kernel_size
        self.steps = spec.steps
        self.encoders: list[list[Layer]] = []
        self.pools: list[MaxPool2] = []
        in_c = 1
        for i in range(spec.steps):
            out_c = spec.base_channels * 2 ** i
            self.encoders.append(self._conv_block(f"enc{i}", in_c, out_c, k, rng))
            self.pools.append(self._add(f"enc{i}.pool", MaxPool2()))
            in_c = out_c
        self.bottleneck = self._conv_block("bottleneck", in_c, in_c * 2, k, rng)
        self.ups: list[Upsample2] = []
        self.post_ups: list[list[Layer]] = []
        self.fuses: list[list[Layer]] = []
        # Decoder lists run deepest level first, matching application order.
        for i in reversed(range(spec.steps)):
            c = spec.base_channels * 2 ** i
            self.ups.append(self._add(f"dec{i}.up", Upsample2()))
            self.post_ups.append(self._conv_block(f"dec{i}.post", 2 * c, c, k, rng, double=False))
            self.fuses.append(self._conv_block(f"dec{i}.fuse", 2 * c, c, k, rng))
        self.head = self._add("head.conv", Conv2d(spec.base_channels, 2, 1, rng))
        self._skip_channels: list[int] = []

    def _conv_block(self, prefix: str, in_c: int, out_c: int, k: int,
                    rng: np.random.Generator, double: bool | None = None) -> list[Layer]:
        spec = self.spec
        repeats = 2 if (spec.double_conv if double is None else double) else 1
        block: list[Layer] = []
        for j in range(repeats):
            block.append(self._add(f"{prefix}.conv{j}",
                                   Conv2d(in_c if j == 0 else out_c, out_c, k, rng)))
            if spec.batch_norm:
                block.append(self._add(f"{prefix}.bn{j}", BatchNorm2d(out_c)))
            act = LeakyReLU() if spec.activation == "leaky_relu" else ReLU()
            block.append(self._add(f"{prefix}.act{j}", act))
        return block

    @staticmethod
    def _run(block: list[Layer], x: np.ndarray, train: bool) -> np.ndarray:
        for layer in block:
            x = layer.forward(x, train=train)
        return x

    @staticmethod
    def _run_back(block: list[Layer], grad: np.ndarray) -> np.ndarray:
        for layer in reversed(block):
            grad = layer.backward(grad)
        return grad

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4:
            raise ValueError(f"expected (n, c, h, w) input, got shape {x.shape}")
        div = 1 << self.steps
        if x.shape[2] % div or x.shape[3] % div:
            raise ValueError(
                f"input {x.shape[2]}x{x.shape[3]} not divisible by 2^{self.steps}")
        skips = []
        for block, pool in zip(self.encoders, self.pools):
            x = self._run(block, x, train)
            skips.append(x)
            x = pool.forward(x, train=train)
        x = self._run(self.bottleneck, x, train)
        self._skip_channels = []
        for j, (up, post, fuse) in enumerate(zip(self.ups, self.post_ups, self.fuses)):
            skip = skips[self.steps - 1 - j]
            x = up.forward(x, train=train)
            x = self._run(post, x, train)
            self._skip_channels.append(skip.shape[1])
            x = concat_channels(skip, x)
            x = self._run(fuse, x, train)
        return self.head.forward(x, train=train)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        g = self.head.backward(grad)
        skip_grads: list[np.ndarray | None] = [None] * self.steps
        for j in reversed(range(self.steps)):
            g = self._run_back(self.fuses[j], g)
            g_skip, g = split_channels_grad(g, self._skip_channels[j])
            skip_grads[self.steps - 1 - j] = g_skip
            g = self._run_back(self.post_ups[j], g)
            g = self.ups[j].backward(g)
        g = self._run_back(self.bottleneck, g)
        for i in reversed(range(self.steps)):
            g = self.pools[i].backward(g)
            g = g + skip_grads[i]
            g = self._run_back(self.encoders[i], g)
        return g


def build_unet(spec: UNetSpec, seed: int) -> UNet:
    return UNet(spec, seed)


def build_shallow(spec: ShallowSpec, seed: int) -> ChainNetwork:
    rng = np.random.default_rng(seed)
    net = ChainNetwork(spec)
    k = spec.kernel_size
    if spec.variant == "single_filter":
        net._add("filter.conv", Conv2d(1, 1, k, rng))
        net._add("head.fixed", FixedSignHead())
    else:
        net._add("bank.conv", Conv2d(1, 32, k, rng))
        net._add("bank.act", ReLU())
        net._add("head.conv", Conv2d(32, 2, 1, rng))
    return net


def count_parameters(net: Network) -> int:
    return sum(arr.size for arr in net.params.values())


def export_kernels(net: Network, first_layer_only: bool = False):
    """First-layer spatial filters plus their elementwise mean, raw values.

    Deep nets hold features beyond the first layer, so they are rejected
    unless ``first_layer_only`` acknowledges the truncation.
    """
    if net.kind != "shallow" and not first_layer_only:
        raise ValueError("deep network: pass first_layer_only=True to export "
                         "just the first-layer filters")
    named = net.named_layers()
    if not named:
        raise ValueError("network has no layers to export")
    first = named[0][1]
    if not isinstance(first, Conv2d) or first.params["w"].shape[2] < 2:
        raise ValueError("first layer is not a spatial convolution")
    w = first.params["w"]
    kernels = [w[i, 0].copy() for i in range(w.shape[0])]
    mean = np.mean(np.stack(kernels), axis=0)
    return kernels, mean


def _spec_meta(net: Network) -> dict[str, float]:
    meta = {"meta.format_version": float(META_FORMAT_VERSION),
            "meta.kind": float(_KIND_CODES[net.kind])}
    spec = net.spec
    if isinstance(spec, UNetSpec):
        meta.update({
            "meta.steps": float(spec.steps),
            "meta.base_channels": float(spec.base_channels),
            "meta.kernel_size": float(spec.kernel_size),
            "meta.double_conv": float(spec.double_conv),
            "meta.batch_norm": float(spec.batch_norm),
            "meta.activation": float(_ACT_CODES[spec.activation]),
        })
    else:
        meta.update({
            "meta.variant": float(_VARIANT_CODES[spec.variant]),
            "meta.kernel_size": float(spec.kernel_size),
        })
    return meta


def save_model(path: str | Path, net: Network, blur_sigma: float | None = None,
               adam_state: dict[str, np.ndarray] | None = None) -> None:
    """Write a self-contained checkpoint: meta records, params, buffers.

    ``adam_state`` (from train) rides along under ``adam.`` for mid-run
    saves; plain inference loads ignore it.
    """
    records: dict[str, np.ndarray | float] = dict(_spec_meta(net))
    if blur_sigma is not None:
        records["meta.blur_sigma"] = float(blur_sigma)
    records.update(net.params)
    records.update(net.buffers)
    if adam_state:
        records.update({f"adam.{k}": v for k, v in adam_state.items()})
    save_tensors(path, records)


def load_model(path: str | Path):
    """Rebuild the architecture from meta records and load its weights.

    Returns ``(net, meta)`` where meta maps bare names (``blur_sigma`` etc.)
    to floats.
    """
    records = load_tensors(path)
    meta = {k[len("meta."):]: float(v) for k, v in records.items() if k.startswith("meta.")}
    if "kind" not in meta:
        raise CheckpointFormatError(f"{path}: missing architecture records")
    kind = _decode(_KIND_CODES, meta["kind"], "architecture kind")
    if kind == "unet":
        spec = UNetSpec(
            steps=int(meta["steps"]),
            base_channels=int(meta["base_channels"]),
            kernel_size=int(meta["kernel_size"]),
            double_conv=bool(meta["double_conv"]),
            batch_norm=bool(meta["batch_norm"]),
            activation=_decode(_ACT_CODES, meta["activation"], "activation"),
        )
        net: Network = build_unet(spec, seed=0)
    else:
        spec = ShallowSpec(
            variant=_decode(_VARIANT_CODES, meta["variant"], "variant"),
            kernel_size=int(meta["kernel_size"]),
        )
        net = build_shallow(spec, seed=0)
    net.load_state(records)
    return net, meta


def write_spec_json(path: str | Path, spec: UNetSpec | ShallowSpec) -> None:
    Path(path).write_text(json.dumps(spec.to_json(), indent=2, sort_keys=True) + "\n")


def read_spec_json(path: str | Path) -> UNetSpec | ShallowSpec:
    return spec_from_json(json.loads(Path(path).read_text()))
