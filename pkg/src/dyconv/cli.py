"""``dyconv`` command line: train, evaluate, inspect, cost, xor, gradcheck.

Exit codes: 0 success, 1 check failure, 2 usage or config error, 3 divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

from . import cost as costmod
from . import gradcheck, inspection
from .data import DATASETS, Dataset, load_dataset, normalize, load_mnist_dir
from .dynamic import XOR_POINTS, AggregationMode, dynamic_xor, static_perceptron_xor
from .errors import ConfigError, DataError, DivergenceError, DyConvError, ShapeError
from .train import TrainConfig, evaluate, load_checkpoint, save_checkpoint, solve_xor, train

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3
CONFIG_VERSION = 1
CONFIG_KEYS = {"spec_version", "model", "dataset", "train", "cost", "output_dir", "seed"}
MODEL_KEYS = {"kind", "k", "stem_channels", "blocks"}


# -- run config -------------------------------------------------------------------------------
def parse_run_config(doc: Any) -> tuple[TrainConfig, dict]:
    """Validate a run-config document; returns the training config and the
    remaining top-level options (``cost``, ``output_dir``)."""
    if not isinstance(doc, dict):
        raise ConfigError("run config must be a JSON object")
    unknown = set(doc) - CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if doc.get("spec_version") != CONFIG_VERSION:
        raise ConfigError(f"spec_version must be {CONFIG_VERSION}")
    fields: dict[str, Any] = dict(doc.get("train") or {})

    model = doc.get("model", "dycnn")
    if isinstance(model, str):
        model = {"kind": model}
    if not isinstance(model, dict) or set(model) - MODEL_KEYS:
        raise ConfigError(f"model must be a kind string or an object with keys {sorted(MODEL_KEYS)}")
    if "kind" in model:
        fields["model"] = model["kind"]
    for key in ("k", "stem_channels", "blocks"):
        if key in model:
            fields[key] = model[key]

    dataset = doc.get("dataset", "digits")
    if isinstance(dataset, str):
        dataset = {"name": dataset}
    if not isinstance(dataset, dict) or set(dataset) - {"name", "path"}:
        raise ConfigError("dataset must be a name or an object with keys name, path")
    fields["dataset"] = dataset.get("name", "digits")
    fields["dataset_path"] = dataset.get("path")
    if fields["dataset"] not in DATASETS:
        raise ConfigError(f"unknown dataset {fields['dataset']!r}; choose from {DATASETS}")
    if fields["dataset"] == "mnist" and not fields["dataset_path"]:
        raise ConfigError("the mnist dataset needs dataset.path")

    if "seed" in doc:
        fields["seed"] = doc["seed"]
    if fields.get("model", "dycnn") not in ("dycnn", "cnn", "dyperceptron"):
        raise ConfigError(f"unknown model kind {fields.get('model')!r}")
    try:
        config = TrainConfig.from_dict(fields)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None

    extra = {"cost": doc.get("cost"), "output_dir": doc.get("output_dir")}
    if extra["cost"] is not None and (not isinstance(extra["cost"], dict) or set(extra["cost"]) - {"network", "k", "width"}):
        raise ConfigError("cost must be an object with keys network, k, width")
    return config, extra


def load_run_config(path: str) -> tuple[TrainConfig, dict]:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from None
    return parse_run_config(doc)


def resolve_dataset(spec: str, seed: int = 0) -> tuple[Dataset, Dataset]:
    """A dataset id (``digits``, ``blobs``, ``xor``) or a directory of MNIST IDX files."""
    if spec in DATASETS and spec != "mnist":
        return load_dataset(spec, seed=seed)
    path = spec[len("mnist:"):] if spec.startswith("mnist:") else spec
    if not Path(path).is_dir():
        raise DataError(f"{spec!r} is neither a dataset id nor a directory")
    train_set, test_set = load_mnist_dir(path)
    normalize(train_set, test_set)
    return train_set, test_set


def _check_compatible(model, ds: Dataset) -> None:
    cfg = model.config
    if cfg.kind == "dyperceptron":
        expected = (2,)
    else:
        expected = (cfg.in_channels, cfg.input_size, cfg.input_size)
    if tuple(ds.sample_shape) != expected or ds.num_classes != cfg.num_classes:
        raise ShapeError(
            f"checkpoint expects samples {expected} with {cfg.num_classes} classes, "
            f"dataset has {tuple(ds.sample_shape)} with {ds.num_classes}"
        )


# -- commands -------------------------------------------------------------------------------
def cmd_train(args) -> int:
    config, extra = load_run_config(args.config)
    out = Path(args.out or extra["output_dir"] or "runs/latest")
    out.mkdir(parents=True, exist_ok=True)
    datasets = load_dataset(config.dataset, config.dataset_path, seed=config.seed)
    result = train(config, datasets=datasets, metrics_path=out / "metrics.jsonl",
                   on_epoch=lambda r: print(f"epoch {r['epoch']:3d}  loss {r['loss']:.4f}  "
                                            f"top1 {100 * r['top1']:.2f}  tau {r['tau']:.2f}  lr {r['lr']:.4f}"))
    final_tau = result.history[-1]["tau"]
    save_checkpoint(out / "checkpoint.npz", result.model, result.model_config,
                    {"tau": final_tau, "train": config.to_dict(), "normalization": result.normalization})
    if extra["cost"] is not None and hasattr(result.model, "network_spec"):
        spec = result.model.network_spec()
        k = int(extra["cost"].get("k", config.k))
        report = costmod.network_madds(spec, dynamic=result.model.config.dynamic, k=k)
        (out / "cost.json").write_text(report.to_json())
    print(f"wrote {out / 'checkpoint.npz'} and {out / 'metrics.jsonl'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    _, test_set = resolve_dataset(args.dataset, args.seed)
    _check_compatible(model, test_set)
    acc = evaluate(model, test_set, args.mode, seed=args.seed)
    print(json.dumps({"mode": args.mode, "top1": acc}))
    return EXIT_OK


def cmd_inspect(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    _, test_set = resolve_dataset(args.dataset, args.seed)
    _check_compatible(model, test_set)
    if args.what == "modes":
        text, doc = inspection.modes_report(inspection.ablate_modes(model, test_set, seed=args.seed))
    elif args.what == "stages":
        if not hasattr(model, "num_stages"):
            raise ConfigError("stage masking needs a convolutional model")
        rows = [(m, inspection.ablate_stages(model, test_set, m, seed=args.seed))
                for m in inspection.nested_stage_masks(model.num_stages)]
        text, doc = inspection.stages_report(model, rows)
    else:
        if not hasattr(model, "dynamic_layers"):
            raise ConfigError("attention statistics need a convolutional model")
        text, doc = inspection.stats_report(inspection.attention_stats(model, test_set))
    print(inspection.to_json(doc) if args.format == "json" else text)
    return EXIT_OK


def _network(name: str, width: float) -> costmod.NetworkSpec:
    if name == "mobilenet_v2":
        return costmod.mobilenet_v2_spec(width)
    if name.startswith("file:"):
        return costmod.load_network(name[len("file:"):])
    raise ConfigError(f"unknown network {name!r}; use mobilenet_v2 or file:PATH")


def cmd_cost(args) -> int:
    net = _network(args.network, args.width)
    static = costmod.network_madds(net, dynamic=False)
    dynamic = costmod.network_madds(net, dynamic=True, k=args.k)
    if args.format == "json":
        print(json.dumps({"network": net.name, "k": args.k, "static": static.to_dict(),
                          "dynamic": dynamic.to_dict()}, indent=2))
    else:
        print(f"{net.name}  static {static.total / 1e6:.1f}M  dynamic(K={args.k}) {dynamic.total / 1e6:.1f}M  "
              f"delta {(dynamic.total - static.total) / 1e6:.2f}M")
        print(dynamic.to_table())
    return EXIT_OK


def cmd_xor(args) -> int:
    print("hand-built dynamic perceptron (one layer, K=2)")
    for x in XOR_POINTS:
        print(f"  {x.astype(int).tolist()} -> {dynamic_xor(x):g}")
    print("hand-built static network (two layers)")
    for x in XOR_POINTS:
        print(f"  {x.astype(int).tolist()} -> {static_perceptron_xor(x):g}")
    _, step = solve_xor(seed=args.seed, max_steps=args.max_steps)
    if step is None:
        print(f"trained K=2 dynamic perceptron: not solved in {args.max_steps} steps")
        return EXIT_CHECK
    print(f"trained K=2 dynamic perceptron: 4/4 after {step} steps")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_all(seed=args.seed, corrupt=args.corrupt)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name.ljust(width)}  {r.max_rel_error:.3e}  {'ok' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


# -- entry point ------------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dyconv", description="Dynamic convolution toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a JSON run config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", default=None, help="output directory (defaults to output_dir in the config)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="top-1 accuracy of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True, help="dataset id or MNIST directory")
    e.add_argument("--mode", default="attention", choices=[m.value for m in AggregationMode])
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_evaluate)

    i = sub.add_parser("inspect", help="aggregation-mode and stage ablations, attention statistics")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--dataset", required=True, help="dataset id or MNIST directory")
    i.add_argument("--what", choices=("modes", "stages", "stats"), default="modes")
    i.add_argument("--format", choices=("table", "json"), default="table")
    i.add_argument("--seed", type=int, default=0)
    i.set_defaults(func=cmd_inspect)

    c = sub.add_parser("cost", help="analytic Mult-Adds of a network")
    c.add_argument("--network", default="mobilenet_v2", help="mobilenet_v2 or file:PATH")
    c.add_argument("--width", type=float, default=1.0)
    c.add_argument("--k", type=int, default=4)
    c.add_argument("--format", choices=("json", "table"), default="table")
    c.set_defaults(func=cmd_cost)

    x = sub.add_parser("xor", help="XOR with one dynamic layer")
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--max-steps", type=int, default=2000)
    x.set_defaults(func=cmd_xor)

    g = sub.add_parser("gradcheck", help="finite-difference check of every primitive")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DyConvError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
