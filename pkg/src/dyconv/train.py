"""SGD training harness with learning-rate and temperature schedules."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence, Union

import numpy as np

from . import ops
from .data import Dataset, load_dataset
from .dynamic import AggregationMode
from .errors import ConfigError, DataError, DivergenceError, ShapeError
from .models import ModelConfig, build_model
from .nn import Module
from .tensor import DTYPES, Tensor, backward, no_grad

CHECKPOINT_FORMAT = "dyconv-checkpoint"
CHECKPOINT_VERSION = 1


# -- schedules -----------------------------------------------------------------------
@dataclass(frozen=True)
class ConstantTau:
    tau: float = 1.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError("temperature must be positive")


@dataclass(frozen=True)
class AnnealTau:
    """Linear decay from ``start`` to ``end`` over the first ``epochs`` epochs."""

    start: float = 30.0
    end: float = 1.0
    epochs: int = 10

    def __post_init__(self):
        if not (self.start > 0 and self.end > 0 and self.epochs > 0):
            raise ConfigError("annealing needs positive temperatures and epoch count")
        if self.end > self.start:
            raise ConfigError("annealing must not increase the temperature")


def tau_at(schedule: Union[ConstantTau, AnnealTau], epoch: int) -> float:
    if epoch < 0:
        raise ConfigError("epoch must be non-negative")
    if isinstance(schedule, ConstantTau):
        return schedule.tau
    if epoch >= schedule.epochs:
        return schedule.end
    return schedule.start - (schedule.start - schedule.end) * epoch / schedule.epochs


@dataclass(frozen=True)
class CosineLR:
    lr0: float


@dataclass(frozen=True)
class StepLR:
    lr0: float
    milestones: tuple[int, ...] = ()
    factor: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(self.milestones))
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError("milestones must be strictly increasing")


def lr_at(schedule: Union[CosineLR, StepLR], epoch: int, total_epochs: int) -> float:
    if isinstance(schedule, CosineLR):
        return schedule.lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))
    passed = sum(1 for m in schedule.milestones if epoch >= m)
    return schedule.lr0 * schedule.factor**passed


def sgd_step(
    params: Sequence[np.ndarray],
    grads: Sequence[Optional[np.ndarray]],
    buffers: Sequence[np.ndarray],
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
) -> None:
    """In-place SGD with momentum: ``v = m v + g + wd p``; ``p -= lr v``."""
    if not (len(params) == len(grads) == len(buffers)):
        raise ShapeError("params, grads and buffers must align")
    for p, g, v in zip(params, grads, buffers):
        if v.shape != p.shape or (g is not None and g.shape != p.shape):
            raise ShapeError(f"buffer/grad shape does not match parameter shape {p.shape}")
        step = weight_decay * p if weight_decay else 0.0
        if g is not None:
            step = step + g
        v *= momentum
        v += step
        p -= (lr * v).astype(p.dtype, copy=False)


class SGD:
    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        sgd_step([p.data for p in self.params], [p.grad for p in self.params], self.buffers, lr,
                 self.momentum, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# -- configuration -----------------------------------------------------------------------
@dataclass
class TrainConfig:
    dataset: str = "digits"
    dataset_path: Optional[str] = None
    model: str = "dycnn"
    k: int = 4
    epochs: int = 10
    batch_size: int = 64
    lr0: float = 0.1
    lr_schedule: dict = field(default_factory=lambda: {"kind": "cosine"})
    momentum: float = 0.9
    weight_decay: float = 1e-4
    tau_schedule: dict = field(default_factory=lambda: {"kind": "anneal", "start": 30.0, "end": 1.0, "epochs": 10})
    seed: int = 0
    dtype: str = "f32"
    blocks: Optional[list] = None
    stem_channels: Optional[int] = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.k < 1:
            raise ConfigError("epochs, batch_size and k must be positive")
        if self.lr0 < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("learning rate, momentum and weight decay must be non-negative")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}")
        self.tau_schedule_obj()
        self.lr_schedule_obj()

    def tau_schedule_obj(self) -> Union[ConstantTau, AnnealTau]:
        spec = dict(self.tau_schedule)
        kind = spec.pop("kind", None)
        try:
            if kind == "constant":
                return ConstantTau(**spec)
            if kind == "anneal":
                return AnnealTau(**spec)
        except TypeError as exc:
            raise ConfigError(f"bad tau_schedule: {exc}") from None
        raise ConfigError(f"unknown tau schedule {kind!r}")

    def lr_schedule_obj(self) -> Union[CosineLR, StepLR]:
        spec = dict(self.lr_schedule)
        kind = spec.pop("kind", None)
        try:
            if kind == "cosine" and not spec:
                return CosineLR(self.lr0)
            if kind == "step":
                return StepLR(self.lr0, tuple(spec.get("milestones", ())), spec.get("factor", 0.1))
        except TypeError as exc:
            raise ConfigError(f"bad lr_schedule: {exc}") from None
        raise ConfigError(f"unknown lr schedule {self.lr_schedule!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def model_config(self, train: Dataset) -> ModelConfig:
        if self.model == "dyperceptron":
            return ModelConfig(kind="dyperceptron", k=self.k, seed=self.seed, dtype=self.dtype,
                               tau=tau_at(self.tau_schedule_obj(), 0))
        c, h = train.sample_shape[0], train.sample_shape[-1]
        extra = {}
        if self.blocks is not None:
            extra["blocks"] = tuple(tuple(b) for b in self.blocks)
        if self.stem_channels is not None:
            extra["stem_channels"] = self.stem_channels
        return ModelConfig(kind=self.model, in_channels=c, input_size=h, num_classes=train.num_classes,
                           k=self.k, tau=tau_at(self.tau_schedule_obj(), 0), seed=self.seed, dtype=self.dtype, **extra)


# -- loops ---------------------------------------------------------------------------------
def evaluate(
    model: Module,
    dataset: Dataset,
    mode: Union[str, AggregationMode] = AggregationMode.ATTENTION,
    seed: int = 0,
    batch_size: int = 200,
    stage_mask: Optional[Sequence[bool]] = None,
) -> float:
    """Top-1 accuracy with batch norm in eval mode; parameters are untouched."""
    if len(dataset) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    mode = AggregationMode.parse(mode)
    rng = np.random.default_rng(seed)
    was_training = model.training
    model.eval()
    correct = 0
    try:
        with no_grad():
            for xb, yb in dataset.batches(batch_size):
                kwargs = {"stage_mask": stage_mask} if stage_mask is not None else {}
                logits = model(Tensor(xb), mode=mode, rng=rng, **kwargs)
                correct += int((logits.data.argmax(axis=1) == yb).sum())
    finally:
        model.train(was_training)
    return correct / len(dataset)


@dataclass
class TrainResult:
    model: Module
    history: list[dict[str, Any]]
    model_config: Optional[ModelConfig] = None
    normalization: dict = field(default_factory=dict)


def train(
    config: TrainConfig,
    model: Optional[Module] = None,
    datasets: Optional[tuple[Dataset, Dataset]] = None,
    metrics_path: Optional[Union[str, Path]] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Run ``config.epochs`` epochs of SGD and evaluate after each one.

    The temperature for epoch ``e`` is set before its first forward pass.
    Metrics are ``{epoch, loss, top1, tau, lr}`` records, optionally
    appended to a JSONL file.
    """
    if datasets is None:
        datasets = load_dataset(config.dataset, config.dataset_path, seed=config.seed)
    dtype = DTYPES[config.dtype]
    train_set, test_set = (d.astype(dtype) for d in datasets)
    model_config = None
    if model is None:
        model_config = config.model_config(train_set)
        model = build_model(model_config)
    tau_schedule = config.tau_schedule_obj()
    lr_schedule = config.lr_schedule_obj()
    opt = SGD(model.parameters(), config.momentum, config.weight_decay)
    rng = np.random.default_rng(config.seed)
    history = []
    out = open(metrics_path, "w") if metrics_path is not None else None
    try:
        for epoch in range(config.epochs):
            tau = tau_at(tau_schedule, epoch)
            lr = lr_at(lr_schedule, epoch, config.epochs)
            _set_tau(model, tau)
            model.train()
            total, seen = 0.0, 0
            for xb, yb in train_set.batches(config.batch_size, rng):
                opt.zero_grad()
                loss = ops.cross_entropy_loss(model(Tensor(xb)), yb)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}", epoch)
                backward(loss)
                opt.step(lr)
                total += value * len(yb)
                seen += len(yb)
            record = {"epoch": epoch, "loss": total / seen, "top1": evaluate(model, test_set), "tau": tau, "lr": lr}
            history.append(record)
            if out is not None:
                out.write(json.dumps(record) + "\n")
                out.flush()
            if on_epoch is not None:
                on_epoch(record)
    finally:
        if out is not None:
            out.close()
    return TrainResult(model, history, model_config, dict(train_set.normalization))


def _set_tau(model: Module, tau: float) -> None:
    if hasattr(model, "set_temperature"):
        model.set_temperature(tau)


def solve_xor(seed: int = 0, max_steps: int = 2000, k: int = 2, lr: float = 0.5, momentum: float = 0.9,
              tau: float = 1.0) -> tuple[Module, Optional[int]]:
    """Train a K-kernel dynamic perceptron on the four XOR points.

    Returns the model and the first step after which all four points are
    classified correctly (``None`` if never within ``max_steps``).
    """
    from .data import make_xor

    ds = make_xor()
    model = build_model(ModelConfig(kind="dyperceptron", k=k, tau=tau, seed=seed))
    opt = SGD(model.parameters(), momentum)
    x = Tensor(ds.x)
    for step in range(1, max_steps + 1):
        opt.zero_grad()
        backward(ops.cross_entropy_loss(model(x), ds.y))
        opt.step(lr)
        with no_grad():
            if np.array_equal(model(x).data.argmax(axis=1), ds.y):
                return model, step
    return model, None


# -- checkpoints ---------------------------------------------------------------------------
def save_checkpoint(path: Union[str, Path], model: Module, model_config: ModelConfig, extra: Optional[dict] = None) -> None:
    """Write a versioned npz container of named tensors plus a JSON header."""
    state = model.state_dict()
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model": model_config.to_dict(),
        "tensors": {k: {"shape": list(v.shape), "dtype": str(v.dtype)} for k, v in state.items()},
        "extra": extra or {},
    }
    arrays = {f"t/{k}": v for k, v in state.items()}
    with open(path, "wb") as f:
        np.savez(f, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path: Union[str, Path]) -> tuple[Module, dict]:
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(bytes(z["__meta__"]).decode())
            state = {k[2:]: z[k] for k in z.files if k.startswith("t/")}
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path} is not a version-{CHECKPOINT_VERSION} dyconv checkpoint")
    for name, info in meta["tensors"].items():
        if list(state[name].shape) != info["shape"] or str(state[name].dtype) != info["dtype"]:
            raise DataError(f"checkpoint tensor {name} disagrees with its manifest")
    config = ModelConfig.from_dict(meta["model"])
    model = build_model(config)
    model.load_state_dict(state)
    if "tau" in meta.get("extra", {}):
        _set_tau(model, meta["extra"]["tau"])
    return model, meta
