"""Is the trained network really dynamic?  Aggregation-mode and stage ablations
plus attention statistics over a dataset."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import Dataset
from .dynamic import AggregationMode
from .errors import ConfigError, DataError
from .tensor import Tensor, no_grad
from .train import evaluate

MODE_LABELS = {
    AggregationMode.ATTENTION: "attention: sum pi_k(x) W_k",
    AggregationMode.AVERAGE: "average: sum W_k / K",
    AggregationMode.MAX_ATTENTION: "max: W_argmax(pi)",
    AggregationMode.SHUFFLE_PER_SAMPLE: "shuffle per image",
    AggregationMode.SHUFFLE_ACROSS_SAMPLES: "shuffle across images",
}


def parameter_checksum(model) -> str:
    h = hashlib.sha256()
    for name, arr in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def _kernel_count(model) -> int:
    layers = model.dynamic_layers() if hasattr(model, "dynamic_layers") else []
    return min((l.k for l in layers), default=1)


def ablate_modes(model, dataset: Dataset, seed: int = 0, batch_size: int = 200) -> dict[AggregationMode, float]:
    """Top-1 accuracy under each of the five aggregation modes, attention first."""
    if _kernel_count(model) < 2:
        raise ConfigError("mode ablation needs dynamic layers with K >= 2")
    return {mode: evaluate(model, dataset, mode, seed=seed, batch_size=batch_size) for mode in AggregationMode}


def nested_stage_masks(num_stages: int) -> list[tuple[bool, ...]]:
    """Attention enabled on growing suffixes of stages, then shrinking prefixes.

    For five stages this yields the ten rows of the usual layout, from
    "last stage only" through "all stages" down to "none".
    """
    s = num_stages
    rows = [tuple([False] * (s - j) + [True] * j) for j in range(1, s + 1)]
    rows += [tuple([True] * j + [False] * (s - j)) for j in range(s - 1, -1, -1)]
    return rows


def ablate_stages(model, dataset: Dataset, mask: Sequence[bool], seed: int = 0, batch_size: int = 200) -> float:
    """Accuracy with attention only in stages where ``mask`` is true; the other
    stages average their kernels."""
    if len(mask) != model.num_stages:
        raise ConfigError(f"mask has {len(mask)} entries, model has {model.num_stages} stages")
    return evaluate(model, dataset, AggregationMode.ATTENTION, seed=seed, batch_size=batch_size,
                    stage_mask=[bool(m) for m in mask])


@dataclass
class LayerAttentionStats:
    layer: int
    stage: int
    resolution: int
    mean_attention: np.ndarray
    mean_entropy: float
    max_share_hist: np.ndarray
    bin_edges: np.ndarray

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "stage": self.stage,
            "resolution": self.resolution,
            "mean_attention": self.mean_attention.tolist(),
            "mean_entropy": self.mean_entropy,
            "max_share_hist": self.max_share_hist.tolist(),
            "bin_edges": self.bin_edges.tolist(),
        }


@dataclass
class AttentionStats:
    layers: list[LayerAttentionStats] = field(default_factory=list)

    @property
    def entropies(self) -> list[float]:
        return [l.mean_entropy for l in self.layers]

    def stage_entropy(self) -> dict[int, float]:
        stages: dict[int, list[float]] = {}
        for l in self.layers:
            stages.setdefault(l.stage, []).append(l.mean_entropy)
        return {s: float(np.mean(v)) for s, v in sorted(stages.items())}

    def to_dict(self) -> dict:
        return {"layers": [l.to_dict() for l in self.layers]}


def attention_stats(model, dataset: Dataset, batch_size: int = 200, bins: int = 10) -> AttentionStats:
    """Per dynamic layer: mean attention, mean entropy (nats) and a histogram
    of the largest attention weight per sample."""
    if len(dataset) == 0:
        raise DataError("cannot collect attention statistics on an empty dataset")
    dyn = [(i, l) for i, l in enumerate(model.layers) if model.is_dynamic(i)]
    collected: list[list[np.ndarray]] = [[] for _ in dyn]
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            for xb, _ in dataset.batches(batch_size):
                model(Tensor(xb))
                for j, (_, layer) in enumerate(dyn):
                    collected[j].append(layer.last_attention.astype(np.float64))
    finally:
        model.train(was_training)
    stats = AttentionStats()
    for (i, layer), chunks in zip(dyn, collected):
        pi = np.concatenate(chunks)
        k = pi.shape[1]
        entropy = -(pi * np.log(np.clip(pi, 1e-300, None))).sum(axis=1)
        edges = np.linspace(1.0 / k, 1.0, bins + 1)
        hist, _ = np.histogram(pi.max(axis=1), bins=edges)
        stage = model.stage_of(i)
        stats.layers.append(
            LayerAttentionStats(i, stage, model.stage_resolutions[stage], pi.mean(axis=0),
                                float(np.clip(entropy.mean(), 0.0, math.log(k))), hist, edges)
        )
    return stats


# -- reports -------------------------------------------------------------------------------------
def _aligned(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(r[i])) for r in list(rows) + [header]) for i in range(len(header))]
    line = lambda r: "  ".join(str(c).ljust(w) for c, w in zip(r, widths))  # noqa: E731
    return "\n".join([line(header), "  ".join("-" * w for w in widths)] + [line(r) for r in rows])


def modes_report(results: dict[AggregationMode, float]) -> tuple[str, dict]:
    rows = [(MODE_LABELS[m], f"{100 * acc:.1f}") for m, acc in results.items()]
    doc = {"modes": [{"mode": m.value, "top1": acc} for m, acc in results.items()]}
    return _aligned(("Kernel aggregation", "Top-1"), rows), doc


def stages_report(model, results: Sequence[tuple[Sequence[bool], float]]) -> tuple[str, dict]:
    header = tuple(f"{r}^2" for r in model.stage_resolutions) + ("Top-1",)
    rows = [tuple("x" if m else "-" for m in mask) + (f"{100 * acc:.1f}",) for mask, acc in results]
    doc = {
        "stage_resolutions": list(model.stage_resolutions),
        "rows": [{"mask": [bool(m) for m in mask], "top1": acc} for mask, acc in results],
    }
    return _aligned(header, rows), doc


def stats_report(stats: AttentionStats) -> tuple[str, dict]:
    rows = [
        (str(l.layer), str(l.stage), f"{l.resolution}^2", f"{l.mean_entropy:.4f}",
         " ".join(f"{a:.3f}" for a in l.mean_attention))
        for l in stats.layers
    ]
    return _aligned(("layer", "stage", "input", "entropy", "mean attention"), rows), stats.to_dict()


def to_json(doc: dict) -> str:
    return json.dumps(doc, indent=2)
