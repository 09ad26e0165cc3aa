"""Analytic Mult-Adds accounting for static and dynamic networks.

Counting convention: one multiply-accumulate is one MAdd.  Convolutions,
global pooling (one add per input element) and the classifier FC are
counted; batch norm, activations, residual adds and the final softmax are
free.  A dynamic layer additionally pays for its
attention branch (global pooling over the layer input plus two FC layers)
and for aggregating its K kernels and biases once per sample.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional, Union

from .dynamic import reduction_dim
from .errors import ConfigError

SPEC_VERSION = 1
KINDS = ("conv", "depthwise_conv", "fully_connected", "pool", "bn", "act")
CONV_KINDS = ("conv", "depthwise_conv")


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a declarative network description.

    ``dynamic`` marks a layer as eligible for dynamic convolution; ``k`` is
    the number of kernels once a K has been chosen for the network.
    """

    kind: str
    c_in: int
    c_out: int
    kernel_size: int = 1
    stride: int = 1
    padding: int = 0
    groups: int = 1
    input_resolution: tuple[int, int] = (1, 1)
    dynamic: bool = False
    k: Optional[int] = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        object.__setattr__(self, "input_resolution", tuple(int(v) for v in self.input_resolution))
        if min(self.c_in, self.c_out, self.kernel_size, self.stride, self.groups) < 1 or self.padding < 0:
            raise ConfigError(f"layer {self.name or self.kind}: invalid geometry")
        if self.kind == "depthwise_conv" and not (self.groups == self.c_in == self.c_out):
            raise ConfigError(f"depthwise layer {self.name} needs groups == C_in == C_out")
        if self.c_in % self.groups or self.c_out % self.groups:
            raise ConfigError(f"layer {self.name}: channels not divisible by groups")

    @property
    def output_resolution(self) -> tuple[int, int]:
        h, w = self.input_resolution
        if self.kind in CONV_KINDS:
            d, s, p = self.kernel_size, self.stride, self.padding
            return ((h + 2 * p - d) // s + 1, (w + 2 * p - d) // s + 1)
        if self.kind in ("pool", "fully_connected"):
            return (1, 1)
        return (h, w)

    @property
    def is_dynamic(self) -> bool:
        return self.dynamic and self.k is not None


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    input_resolution: tuple[int, int] = (224, 224)
    width_multiplier: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_resolution", tuple(int(v) for v in self.input_resolution))
        convs = [layer for layer in self.layers if layer.kind in CONV_KINDS]
        if convs and convs[0].dynamic:
            raise ConfigError("the first convolution of a network is always static")

    def validate_chain(self) -> None:
        """Each layer's input resolution must be its predecessor's output."""
        expected = self.input_resolution
        for i, layer in enumerate(self.layers):
            if layer.input_resolution != expected:
                raise ConfigError(
                    f"layer {i} ({layer.name or layer.kind}) expects input {layer.input_resolution}, "
                    f"previous layer produces {expected}"
                )
            expected = layer.output_resolution

    def with_k(self, k: Optional[int]) -> "NetworkSpec":
        """Copy in which every dynamic-eligible layer uses ``k`` kernels
        (``None`` makes the whole network static)."""
        layers = [dataclasses.replace(l, k=k if l.dynamic else None) for l in self.layers]
        return dataclasses.replace(self, layers=tuple(layers))


# -- per-layer costs --------------------------------------------------------------
def conv_madds(spec: LayerSpec) -> int:
    """``H' * W' * (C_in / groups) * C_out * D_k^2`` over output positions."""
    if spec.kind not in CONV_KINDS:
        raise ConfigError(f"conv_madds needs a convolution layer, got {spec.kind!r}")
    ho, wo = spec.output_resolution
    return ho * wo * (spec.c_in // spec.groups) * spec.c_out * spec.kernel_size**2


def _require_dynamic(spec: LayerSpec) -> int:
    if not spec.is_dynamic:
        raise ConfigError(f"layer {spec.name or spec.kind} is static")
    return spec.k


def attention_madds(spec: LayerSpec) -> int:
    """Pooling over the layer input plus the two attention FC layers."""
    k = _require_dynamic(spec)
    h, w = spec.input_resolution
    r = reduction_dim(spec.c_in)
    return h * w * spec.c_in + spec.c_in * r + r * k


def aggregation_madds(spec: LayerSpec) -> int:
    """``K * (C_in / groups) * C_out * D_k^2 + K * C_out``."""
    k = _require_dynamic(spec)
    return k * (spec.c_in // spec.groups) * spec.c_out * spec.kernel_size**2 + k * spec.c_out


def check_constraint(spec: LayerSpec, k: Optional[int] = None) -> float:
    """Extra cost of making ``spec`` dynamic relative to its convolution."""
    if k is not None:
        spec = dataclasses.replace(spec, dynamic=True, k=k)
    base = conv_madds(spec)
    if base == 0:
        raise ConfigError("convolution cost is zero")
    return (attention_madds(spec) + aggregation_madds(spec)) / base


# -- network reports ----------------------------------------------------------------
@dataclass
class LayerCost:
    name: str
    kind: str
    conv: int
    attention: int = 0
    aggregation: int = 0

    @property
    def extra(self) -> int:
        return self.attention + self.aggregation

    @property
    def total(self) -> int:
        return self.conv + self.extra

    @property
    def constraint_ratio(self) -> Optional[float]:
        return self.extra / self.conv if self.conv and self.extra else None


@dataclass
class CostReport:
    network: str
    width_multiplier: float
    input_resolution: tuple[int, int]
    k: Optional[int]
    layers: list[LayerCost] = field(default_factory=list)

    @property
    def conv_total(self) -> int:
        return sum(l.conv for l in self.layers)

    @property
    def attention_total(self) -> int:
        return sum(l.attention for l in self.layers)

    @property
    def aggregation_total(self) -> int:
        return sum(l.aggregation for l in self.layers)

    @property
    def total(self) -> int:
        return self.conv_total + self.attention_total + self.aggregation_total

    def to_dict(self) -> dict[str, Any]:
        return {
            "spec_version": SPEC_VERSION,
            "network": self.network,
            "width_multiplier": self.width_multiplier,
            "input_resolution": list(self.input_resolution),
            "k": self.k,
            "totals": {
                "conv": self.conv_total,
                "attention": self.attention_total,
                "aggregation": self.aggregation_total,
                "total": self.total,
            },
            "layers": [
                {
                    "name": l.name,
                    "kind": l.kind,
                    "conv": l.conv,
                    "attention": l.attention,
                    "aggregation": l.aggregation,
                    "constraint_ratio": l.constraint_ratio,
                }
                for l in self.layers
            ],
        }

    def to_json(self, indent: Optional[int] = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    def to_table(self) -> str:
        header = ("layer", "kind", "conv", "attention", "aggregation", "ratio")
        rows = [
            (
                l.name,
                l.kind,
                f"{l.conv:,}",
                f"{l.attention:,}",
                f"{l.aggregation:,}",
                "" if l.constraint_ratio is None else f"{l.constraint_ratio:.4f}",
            )
            for l in self.layers
        ]
        rows.append(
            (
                "TOTAL",
                "",
                f"{self.conv_total:,}",
                f"{self.attention_total:,}",
                f"{self.aggregation_total:,}",
                f"{self.total / 1e6:.1f}M",
            )
        )
        widths = [max(len(r[i]) for r in rows + [header]) for i in range(len(header))]
        fmt = lambda r: "  ".join(c.ljust(w) if i < 2 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))  # noqa: E731
        lines = [fmt(header), "  ".join("-" * w for w in widths)] + [fmt(r) for r in rows]
        return "\n".join(lines)


def network_madds(net: NetworkSpec, dynamic: bool = False, k: int = 4) -> CostReport:
    """Per-layer and total Mult-Adds of ``net``, static or with K kernels."""
    net.validate_chain()
    if dynamic and k < 1:
        raise ConfigError(f"K must be >= 1, got {k}")
    net = net.with_k(k if dynamic else None)
    report = CostReport(net.name, net.width_multiplier, net.input_resolution, k if dynamic else None)
    for i, layer in enumerate(net.layers):
        name = layer.name or f"{i}:{layer.kind}"
        if layer.kind in CONV_KINDS:
            cost = LayerCost(name, layer.kind, conv_madds(layer))
            if layer.is_dynamic:
                cost.attention = attention_madds(layer)
                cost.aggregation = aggregation_madds(layer)
        elif layer.kind == "fully_connected":
            cost = LayerCost(name, layer.kind, layer.c_in * layer.c_out)
        elif layer.kind == "pool":
            # one accumulate per input element, as for the pooling inside attention
            h, w = layer.input_resolution
            cost = LayerCost(name, layer.kind, h * w * layer.c_in)
        else:
            cost = LayerCost(name, layer.kind, 0)
        report.layers.append(cost)
    return report


# -- MobileNetV2 ------------------------------------------------------------------------
def make_divisible(value: float, divisor: int = 8, min_value: Optional[int] = None) -> int:
    """Round a channel count to a multiple of ``divisor`` without dropping
    more than 10% below ``value``."""
    min_value = divisor if min_value is None else min_value
    rounded = max(min_value, int(value + divisor / 2) // divisor * divisor)
    if rounded < 0.9 * value:
        rounded += divisor
    return rounded


# (expansion t, output channels c, repeats n, first stride s)
MOBILENET_V2_BLOCKS = (
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
)


def mobilenet_v2_spec(width_multiplier: float = 1.0, resolution: int = 224, num_classes: int = 1000) -> NetworkSpec:
    """MobileNetV2 as a flat layer list.

    The stem conv and the final 1x1 feature conv are static; the three
    convolutions of every inverted-residual block are dynamic-eligible.
    """
    if not width_multiplier > 0:
        raise ConfigError(f"width multiplier must be positive, got {width_multiplier}")
    layers: list[LayerSpec] = []
    res = (resolution, resolution)

    def add(spec: LayerSpec) -> None:
        nonlocal res
        layers.append(spec)
        res = spec.output_resolution

    c = make_divisible(32 * width_multiplier)
    add(LayerSpec("conv", 3, c, 3, 2, 1, input_resolution=res, name="stem"))
    for b, (t, ch, n, s) in enumerate(MOBILENET_V2_BLOCKS):
        c_out = make_divisible(ch * width_multiplier)
        for i in range(n):
            stride = s if i == 0 else 1
            hidden = c * t
            tag = f"block{b}.{i}"
            if t != 1:
                add(LayerSpec("conv", c, hidden, 1, input_resolution=res, dynamic=True, name=f"{tag}.expand"))
            add(
                LayerSpec(
                    "depthwise_conv", hidden, hidden, 3, stride, 1, hidden,
                    input_resolution=res, dynamic=True, name=f"{tag}.depthwise",
                )
            )
            add(LayerSpec("conv", hidden, c_out, 1, input_resolution=res, dynamic=True, name=f"{tag}.project"))
            c = c_out
    last = make_divisible(1280 * max(1.0, width_multiplier))
    add(LayerSpec("conv", c, last, 1, input_resolution=res, name="head"))
    add(LayerSpec("pool", last, last, input_resolution=res, name="pool"))
    add(LayerSpec("fully_connected", last, num_classes, input_resolution=res, name="classifier"))
    return NetworkSpec("mobilenet_v2", tuple(layers), (resolution, resolution), width_multiplier)


def madds_grid(
    widths: Iterable[float] = (1.0, 0.75, 0.5, 0.35), ks: Iterable[int] = (2, 4, 6, 8), resolution: int = 224
) -> dict[float, dict[str, int]]:
    """Static and dynamic MobileNetV2 totals, keyed by width then ``"static"``/``"K=k"``."""
    grid = {}
    for w in widths:
        net = mobilenet_v2_spec(w, resolution)
        row = {"static": network_madds(net).total}
        for k in ks:
            row[f"K={k}"] = network_madds(net, dynamic=True, k=k).total
        grid[w] = row
    return grid


def format_grid(grid: dict[float, dict[str, int]]) -> str:
    widths = list(grid)
    rows = list(next(iter(grid.values())))
    lines = ["".ljust(8) + "".join(f"x{w:<10}" for w in widths)]
    for r in rows:
        lines.append(r.ljust(8) + "".join(f"{grid[w][r] / 1e6:<11.1f}" for w in widths))
    return "\n".join(lines)


# -- JSON network files ------------------------------------------------------------------
_LAYER_KEYS = {f.name for f in dataclasses.fields(LayerSpec)}
_NET_KEYS = {"spec_version", "name", "input_resolution", "width_multiplier", "layers"}


def _pair(v) -> tuple[int, int]:
    return (int(v), int(v)) if isinstance(v, (int, float)) else tuple(int(x) for x in v)


def network_from_dict(doc: dict[str, Any]) -> NetworkSpec:
    if doc.get("spec_version") != SPEC_VERSION:
        raise ConfigError(f"network file needs spec_version {SPEC_VERSION}")
    unknown = set(doc) - _NET_KEYS
    if unknown:
        raise ConfigError(f"unknown network keys: {sorted(unknown)}")
    layers = []
    for i, entry in enumerate(doc.get("layers", [])):
        bad = set(entry) - _LAYER_KEYS
        if bad:
            raise ConfigError(f"layer {i}: unknown keys {sorted(bad)}")
        entry = dict(entry)
        if "input_resolution" in entry:
            entry["input_resolution"] = _pair(entry["input_resolution"])
        try:
            layers.append(LayerSpec(**entry))
        except TypeError as exc:
            raise ConfigError(f"layer {i}: {exc}") from None
    return NetworkSpec(
        doc.get("name", "network"),
        tuple(layers),
        _pair(doc.get("input_resolution", 224)),
        float(doc.get("width_multiplier", 1.0)),
    )


def network_to_dict(net: NetworkSpec) -> dict[str, Any]:
    return {
        "spec_version": SPEC_VERSION,
        "name": net.name,
        "input_resolution": list(net.input_resolution),
        "width_multiplier": net.width_multiplier,
        "layers": [
            {**dataclasses.asdict(l), "input_resolution": list(l.input_resolution)} for l in net.layers
        ],
    }


def load_network(path: Union[str, Path]) -> NetworkSpec:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read network file {path}: {exc}") from None
    return network_from_dict(doc)
