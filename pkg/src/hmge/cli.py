"""Command-line entry point.

Subcommands: synth, train, eval, ablate, sweep, export. Flags beat values
from a ``--config`` JSON file, which beat built-in defaults. Heavy imports
happen after thread setup so ``--threads``/``HMGE_THREADS`` can cap the
BLAS pool. Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

_TRAIN_DEFAULTS = {
    "embed_size": 64,
    "layers": 2,
    "schedule": None,
    "lr": 0.001,
    "weight_decay": 1e-5,
    "epochs": 2000,
    "patience": 100,
    "seed": 0,
}


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--embed-size", type=int, help="node embedding width M")
    parser.add_argument("--layers", type=int, help="hierarchical layers L (0 = linear baseline)")
    parser.add_argument("--schedule", type=str, help="comma-separated dimension schedule, e.g. 41,21,1")
    parser.add_argument("--lr", type=float, help="Adam learning rate")
    parser.add_argument("--weight-decay", type=float, help="decoupled weight decay")
    parser.add_argument("--epochs", type=int, help="maximum training epochs")
    parser.add_argument("--patience", type=int, help="early-stopping patience")
    parser.add_argument(
        "--identity-features",
        action="store_const",
        const=True,
        help="replace dataset features with one-hot node features",
    )


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, help="run seed")
    parser.add_argument("--threads", type=int, help="cap BLAS worker threads")
    parser.add_argument("--config", type=str, help="JSON file mirroring the flags")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hmge",
        description="Hierarchical multiplex graph embedding: synthesize, train, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic SBM multiplex dataset")
    p.add_argument("--nodes", type=int, help="number of nodes")
    p.add_argument("--dims", type=int, help="number of dimensions")
    p.add_argument("--classes", type=int, help="number of classes (default 2)")
    p.add_argument("--p-in", type=float, help="within-class edge probability")
    p.add_argument("--p-out", type=float, help="cross-class edge probability")
    p.add_argument("--out", type=str, help="output dataset directory")
    _add_common(p)

    p = sub.add_parser("train", help="train embeddings on a dataset directory")
    p.add_argument("--data", type=str, help="dataset directory")
    p.add_argument("--out", type=str, help="output directory")
    _add_train_flags(p)
    _add_common(p)

    p = sub.add_parser("eval", help="link-prediction or classification evaluation")
    p.add_argument("--data", type=str, help="dataset directory")
    p.add_argument("--task", choices=["link", "class"], help="evaluation task")
    p.add_argument("--ratio", type=float, help="edge removal ratio for link task")
    p.add_argument("--train-fraction", type=float, help="labeled fraction for class task")
    p.add_argument("--out", type=str, help="output directory")
    _add_train_flags(p)
    _add_common(p)

    p = sub.add_parser("ablate", help="full model vs both ablations on both tasks")
    p.add_argument("--data", type=str, help="dataset directory")
    p.add_argument("--ratio", type=float, help="edge removal ratio")
    p.add_argument("--train-fraction", type=float, help="labeled fraction")
    p.add_argument("--out", type=str, help="output directory")
    _add_train_flags(p)
    _add_common(p)

    p = sub.add_parser("sweep", help="embedding-size sensitivity sweep")
    p.add_argument("--data", type=str, help="dataset directory")
    p.add_argument("--embed-sizes", type=str, help="comma-separated sizes, e.g. 16,32,64")
    p.add_argument("--train-fraction", type=float, help="labeled fraction")
    p.add_argument("--out", type=str, help="output directory")
    _add_train_flags(p)
    _add_common(p)

    p = sub.add_parser("export", help="re-export embeddings and weights from a model file")
    p.add_argument("--model", type=str, help="model.bin produced by train")
    p.add_argument("--data", type=str, help="dataset directory")
    p.add_argument("--out", type=str, help="output directory")
    _add_common(p)

    return parser


class _Options:
    """Flag > config file > default resolution."""

    def __init__(self, namespace: argparse.Namespace):
        self.ns = vars(namespace)
        self.file_values = {}
        config_path = self.ns.get("config")
        if config_path:
            try:
                self.file_values = json.loads(Path(config_path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise UsageError(f"cannot read config file {config_path}: {exc}")
            if not isinstance(self.file_values, dict):
                raise UsageError(f"config file {config_path} must hold a JSON object")

    def get(self, name: str, default=None, required: bool = False):
        value = self.ns.get(name)
        if value is None:
            value = self.file_values.get(name, default)
        if value is None and required:
            raise UsageError(f"missing required option --{name.replace('_', '-')}")
        return value


class UsageError(Exception):
    pass


def _setup_threads(options: _Options) -> None:
    threads = options.get("threads")
    if threads is None:
        env = os.environ.get("HMGE_THREADS")
        threads = int(env) if env else None
    if threads is not None:
        if int(threads) < 1:
            raise UsageError(f"--threads must be positive, got {threads}")
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(int(threads))


def _parse_schedule(text):
    if text is None:
        return None
    try:
        return tuple(int(x) for x in str(text).split(","))
    except ValueError:
        raise UsageError(f"bad schedule {text!r}; expected comma-separated integers")


def _configs_from(options: _Options):
    from .model import HmgeConfig
    from .training import TrainConfig

    hmge_config = HmgeConfig(
        embed_size=int(options.get("embed_size", _TRAIN_DEFAULTS["embed_size"])),
        num_layers=int(options.get("layers", _TRAIN_DEFAULTS["layers"])),
        dims_schedule=_parse_schedule(options.get("schedule")),
    )
    train_config = TrainConfig(
        epochs=int(options.get("epochs", _TRAIN_DEFAULTS["epochs"])),
        learning_rate=float(options.get("lr", _TRAIN_DEFAULTS["lr"])),
        weight_decay=float(options.get("weight_decay", _TRAIN_DEFAULTS["weight_decay"])),
        patience=int(options.get("patience", _TRAIN_DEFAULTS["patience"])),
        rng_seed=int(options.get("seed", _TRAIN_DEFAULTS["seed"])),
    )
    return hmge_config, train_config


def _load_graph(options: _Options):
    from .multiplex import load_multiplex

    graph = load_multiplex(options.get("data", required=True))
    if options.get("identity_features"):
        import numpy as np

        graph = graph.with_features(np.eye(graph.num_nodes))
    return graph


def _write_report(out_dir: Path, payload) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "report.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def cmd_synth(options: _Options) -> int:
    from .sbm import SbmConfig, generate_multiplex, save_dataset

    config = SbmConfig(
        num_nodes=int(options.get("nodes", required=True)),
        num_dims=int(options.get("dims", required=True)),
        num_classes=int(options.get("classes", 2)),
        p_in=float(options.get("p_in", 0.05)),
        p_out=float(options.get("p_out", 0.01)),
        rng_seed=int(options.get("seed", 0)),
    )
    out = Path(options.get("out", required=True))
    dataset = generate_multiplex(config)
    save_dataset(dataset, out)
    print(
        f"wrote {config.num_dims}-dimension graph on {config.num_nodes} nodes to {out}"
    )
    return EXIT_OK


def cmd_train(options: _Options) -> int:
    from .model import (
        HmgeParams,
        export_combination_weights,
        export_embeddings,
        save_model,
    )
    from .training import train

    graph = _load_graph(options)
    out = Path(options.get("out", required=True))
    out.mkdir(parents=True, exist_ok=True)
    hmge_config, train_config = _configs_from(options)
    result = train(graph, hmge_config, train_config, log_path=out / "train_log.csv")
    export_embeddings(result.embeddings, out / "embeddings.csv")
    if isinstance(result.params, HmgeParams):
        export_combination_weights(result.params, out)
    save_model(out / "model.bin", hmge_config, result.params)
    print(
        f"trained {len(result.loss_history)} epochs, best loss "
        f"{result.best_loss:.6f} at epoch {result.best_epoch}; outputs in {out}"
    )
    return EXIT_OK


def cmd_eval(options: _Options) -> int:
    import numpy as np

    from .evaluation import (
        EvalReport,
        evaluate_classification,
        evaluate_link_prediction,
    )

    graph = _load_graph(options)
    task = options.get("task", required=True)
    out = Path(options.get("out", required=True))
    hmge_config, train_config = _configs_from(options)
    seed = train_config.rng_seed
    if task == "link":
        metrics = evaluate_link_prediction(
            graph,
            hmge_config,
            train_config,
            float(options.get("ratio", 0.1)),
            rng=np.random.default_rng(seed),
        )
    else:
        metrics = evaluate_classification(
            graph,
            hmge_config,
            train_config,
            float(options.get("train_fraction", 0.1)),
            rng=np.random.default_rng(seed),
        )
    report = EvalReport(
        task=task,
        metrics=metrics,
        seed=seed,
        config={"embed_size": hmge_config.embed_size, "layers": hmge_config.num_layers},
    )
    path = _write_report(out, report.to_dict())
    print(f"wrote {path}: " + ", ".join(f"{k}={v:.4f}" for k, v in metrics.items()))
    return EXIT_OK


def cmd_ablate(options: _Options) -> int:
    from .evaluation import run_ablations

    graph = _load_graph(options)
    out = Path(options.get("out", required=True))
    hmge_config, train_config = _configs_from(options)
    rows = run_ablations(
        graph,
        hmge_config,
        train_config,
        ratio=float(options.get("ratio", 0.1)),
        train_fraction=float(options.get("train_fraction", 0.1)),
    )
    path = _write_report(out, {"task": "ablation", "rows": rows, "seed": train_config.rng_seed})
    for row in rows:
        print(
            f"{row['model']:>16}: auc={row['auc']:.4f} ap={row['ap']:.4f} "
            f"f1_macro={row['f1_macro']:.4f} f1_micro={row['f1_micro']:.4f}"
        )
    print(f"wrote {path}")
    return EXIT_OK


def cmd_sweep(options: _Options) -> int:
    import numpy as np

    from .evaluation import classification_metrics
    from .model import HmgeConfig
    from .training import train

    graph = _load_graph(options)
    out = Path(options.get("out", required=True))
    sizes_text = options.get("embed_sizes", required=True)
    try:
        sizes = [int(x) for x in str(sizes_text).split(",")]
    except ValueError:
        raise UsageError(f"bad --embed-sizes {sizes_text!r}")
    base, train_config = _configs_from(options)
    rows = []
    for m in sizes:
        config = HmgeConfig(
            embed_size=m,
            num_layers=base.num_layers,
            dims_schedule=base.dims_schedule,
        )
        result = train(graph, config, train_config)
        metrics = classification_metrics(
            result.embeddings,
            graph.labels,
            float(options.get("train_fraction", 0.1)),
            np.random.default_rng(train_config.rng_seed),
        )
        rows.append({"embed_size": m, **metrics})
        print(
            f"M={m}: accuracy={metrics['accuracy']:.4f} "
            f"f1_macro={metrics['f1_macro']:.4f} f1_micro={metrics['f1_micro']:.4f}"
        )
    path = _write_report(out, {"task": "sweep", "rows": rows, "seed": train_config.rng_seed})
    print(f"wrote {path}")
    return EXIT_OK


def cmd_export(options: _Options) -> int:
    from .model import (
        HmgeParams,
        encode,
        export_combination_weights,
        export_embeddings,
        linear_aggregation_encode,
        load_model,
    )
    from .multiplex import load_multiplex

    config, params = load_model(options.get("model", required=True))
    graph = load_multiplex(options.get("data", required=True))
    out = Path(options.get("out", required=True))
    out.mkdir(parents=True, exist_ok=True)
    if isinstance(params, HmgeParams):
        trace = encode(graph, params, config)
        z = trace.z
        export_combination_weights(params, out)
    else:
        z = linear_aggregation_encode(graph, params, activation=config.activation)
    export_embeddings(z, out / "embeddings.csv")
    print(f"wrote embeddings for {graph.num_nodes} nodes to {out}")
    return EXIT_OK


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "export": cmd_export,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        namespace = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        options = _Options(namespace)
        _setup_threads(options)
        return _COMMANDS[namespace.command](options)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # mapped via the package hierarchy below
        from .errors import ConfigError, DataFormatError, NumericError

        if isinstance(exc, ConfigError):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
        if isinstance(exc, DataFormatError):
            print(f"data error: {exc}", file=sys.stderr)
            return EXIT_DATA
        if isinstance(exc, NumericError):
            print(f"numeric failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        raise


if __name__ == "__main__":
    sys.exit(main())
