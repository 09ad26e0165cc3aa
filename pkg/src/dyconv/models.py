"""Desk-scale networks: a small DY-CNN, its static twin, and the XOR perceptron."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import ops
from .cost import LayerSpec, NetworkSpec
from .dynamic import AggregationMode, DynamicConv2d, DynamicPerceptron
from .errors import ConfigError
from .nn import Linear, Module, StaticConv2d
from .ops import conv_output_size
from .tensor import DTYPES, Tensor


@dataclass
class ModelConfig:
    """Architecture of a desk-scale model.

    ``blocks`` lists ``(out_channels, stride)`` for the 3x3 layers after the
    static stem; they are dynamic when ``dynamic`` is true.
    """

    kind: str = "dycnn"
    in_channels: int = 1
    input_size: int = 16
    num_classes: int = 10
    stem_channels: int = 16
    blocks: Sequence[Sequence[int]] = ((16, 2), (32, 2), (32, 1))
    k: int = 4
    tau: float = 1.0
    dynamic: bool = True
    seed: int = 0
    dtype: str = "f32"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = [list(b) for b in self.blocks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "blocks" in d:
            d["blocks"] = tuple(tuple(b) for b in d["blocks"])
        return cls(**d)


class DYCNN(Module):
    """Static stem -> 3x3 dynamic conv blocks -> global pool -> FC."""

    def __init__(self, config: ModelConfig):
        self.config = config
        dtype = DTYPES[config.dtype]
        rng = np.random.default_rng(config.seed)
        self.stem = StaticConv2d(config.in_channels, config.stem_channels, 3, rng=rng, dtype=dtype)
        layers = []
        c = config.stem_channels
        for c_out, stride in config.blocks:
            if config.dynamic:
                layers.append(DynamicConv2d(c, c_out, 3, stride, k=config.k, tau=config.tau, rng=rng, dtype=dtype))
            else:
                layers.append(StaticConv2d(c, c_out, 3, stride, rng=rng, dtype=dtype))
            c = c_out
        self.layers = layers
        self.classifier = Linear(c, config.num_classes, rng, dtype)
        self._stage_of = self._assign_stages()

    # stage = maximal run of layers sharing an input resolution
    def _assign_stages(self) -> list[int]:
        res = self.config.input_size
        resolutions = [res]  # stem input
        res = conv_output_size(res, 3, 1, 1)
        for layer in self.layers:
            resolutions.append(res)
            res = conv_output_size(res, layer.kernel_size, layer.stride, layer.padding)
        stage, stages = 0, [0]
        for prev, cur in zip(resolutions, resolutions[1:]):
            if cur != prev:
                stage += 1
            stages.append(stage)
        self.stage_resolutions = sorted(set(resolutions), reverse=True)
        return stages[1:]

    @property
    def num_stages(self) -> int:
        return len(self.stage_resolutions)

    def stage_of(self, layer_index: int) -> int:
        return self._stage_of[layer_index]

    def stage_table(self) -> list[dict]:
        rows = []
        for s, res in enumerate(self.stage_resolutions):
            members = [i for i, st in enumerate(self._stage_of) if st == s]
            rows.append({"stage": s, "resolution": res, "layers": members,
                         "dynamic_layers": [i for i in members if self.is_dynamic(i)]})
        return rows

    def is_dynamic(self, layer_index: int) -> bool:
        return isinstance(self.layers[layer_index], DynamicConv2d)

    def dynamic_layers(self) -> list[DynamicConv2d]:
        return [l for l in self.layers if isinstance(l, DynamicConv2d)]

    def set_temperature(self, tau: float) -> None:
        for layer in self.dynamic_layers():
            layer.tau = tau

    @property
    def k(self) -> int:
        return self.config.k if self.config.dynamic else 1

    def forward(
        self,
        x: Tensor,
        mode=AggregationMode.ATTENTION,
        rng: Optional[np.random.Generator] = None,
        stage_mask: Optional[Sequence[bool]] = None,
    ) -> Tensor:
        mode = AggregationMode.parse(mode)
        if stage_mask is not None and len(stage_mask) != self.num_stages:
            raise ConfigError(f"stage mask has {len(stage_mask)} entries, model has {self.num_stages} stages")
        if not isinstance(x, Tensor):
            x = Tensor(x)
        h = self.stem(x)
        for i, layer in enumerate(self.layers):
            if isinstance(layer, DynamicConv2d):
                m = mode
                if stage_mask is not None and not stage_mask[self._stage_of[i]]:
                    m = AggregationMode.AVERAGE
                h = layer(h, m, rng)
            else:
                h = layer(h)
        return self.classifier(ops.global_avg_pool(h))

    def network_spec(self) -> NetworkSpec:
        """The same architecture as a cost-model description."""
        cfg = self.config
        res = (cfg.input_size, cfg.input_size)
        specs = [
            LayerSpec("conv", cfg.in_channels, cfg.stem_channels, 3, 1, 1, input_resolution=res, name="stem")
        ]
        res = specs[-1].output_resolution
        for i, layer in enumerate(self.layers):
            specs.append(
                LayerSpec(
                    "conv", layer.c_in, layer.c_out, layer.kernel_size, layer.stride, layer.padding,
                    layer.groups, input_resolution=res, dynamic=self.is_dynamic(i), name=f"layer{i}",
                )
            )
            res = specs[-1].output_resolution
        c = specs[-1].c_out
        specs.append(LayerSpec("pool", c, c, input_resolution=res, name="pool"))
        specs.append(LayerSpec("fully_connected", c, cfg.num_classes, name="classifier"))
        return NetworkSpec("dycnn", tuple(specs), (cfg.input_size, cfg.input_size))


class XorPerceptron(DynamicPerceptron):
    """Two-class dynamic perceptron on 2-d inputs."""

    def __init__(self, config: ModelConfig):
        self.config = config
        super().__init__(2, 2, config.k, config.tau, np.random.default_rng(config.seed), DTYPES[config.dtype])


def build_model(config: ModelConfig) -> Module:
    if config.kind == "dycnn":
        return DYCNN(config)
    if config.kind == "cnn":
        return DYCNN(ModelConfig(**{**config.to_dict(), "dynamic": False, "blocks": tuple(map(tuple, config.blocks))}))
    if config.kind == "dyperceptron":
        return XorPerceptron(config)
    raise ConfigError(f"unknown model kind {config.kind!r}")
