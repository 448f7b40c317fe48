"""Batch command-line front end.

Subcommands cover the full pipeline: `prepare-mnist` turns IDX files into
the three-crop CSV, `simulate` drops modality blocks, `build-graphs`
exports edge lists, `cv` runs the cross-validated missingness sweep and
writes its table, report, and plot, `train`/`evaluate` handle single
checkpoints, and `gradcheck` verifies every gradient path numerically.

Configuration comes from an INI file plus flag overrides (flags win).
The GATFUSION_OUT environment variable supplies the default output
directory when neither a flag nor the config names one.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import os
import re
import sys
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .data import (
    load_multimodal_csv,
    mnist_dataset,
    simulate_blockwise_missing,
    write_mask_csv,
    write_multimodal_csv,
)
from .errors import ConfigError, FormatError, GatFusionError
from .evaluation import (
    METHODS,
    TrainConfig,
    accuracy,
    auc_from_logits,
    inductive_logits,
    predict_labels,
    run_sweep,
    train_full,
)
from .fusion import (
    fused_forward,
    fusion_loss_and_grads,
    init_fusion_model,
    load_model,
    model_params,
    save_model,
)
from .gat import (
    branch_backward,
    branch_forward,
    branch_params,
    init_branch,
    init_gat_layer,
    layer_backward,
    layer_forward,
    layer_params,
)
from .graphs import fc_graph, knn_graph, write_edgelist
from .numerics import finite_difference_check, make_rng
from .plotting import write_accuracy_plot

OUT_ENV_VAR = "GATFUSION_OUT"
DEFAULT_OUT = "gatfusion-out"
GRAD_TOLERANCE = 1e-4

DEFAULT_LEVELS = (0.1, 0.2, 0.3, 0.4, 0.5)

_CONFIG_SCHEMA = {
    "data": ("dataset",),
    "train": ("epochs", "learning_rate", "heads", "hidden_fraction",
              "k_neighbors", "graph_kind", "variant", "seed", "dropout",
              "standardize", "binary_single_logit"),
    "sweep": ("levels", "methods", "folds", "jobs"),
    "output": ("directory",),
}

_BOOL_WORDS = {"true": True, "yes": True, "on": True, "1": True,
               "false": False, "no": False, "off": False, "0": False}


@dataclass
class ExperimentConfig:
    """Fully resolved settings for `cv` and `train`."""

    dataset: str
    train: TrainConfig
    levels: list[float]
    methods: list[str]
    folds: int
    jobs: int | None
    out_dir: Path


def _parse_int(raw: str, name: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{name} = {raw!r} is not an integer") from None


def _parse_float(raw: str, name: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"{name} = {raw!r} is not a number") from None


def _parse_bool(raw: str, name: str) -> bool:
    try:
        return _BOOL_WORDS[raw.strip().lower()]
    except KeyError:
        raise ConfigError(f"{name} = {raw!r} is not a boolean") from None


def _parse_list(raw: str) -> list[str]:
    return [tok for tok in re.split(r"[,\s]+", raw.strip()) if tok]


def _parse_levels(raw: str, name: str) -> list[float]:
    return [_parse_float(tok, name) for tok in _parse_list(raw)]


def read_config_file(path) -> dict[str, dict[str, str]]:
    """Load an INI config, rejecting unknown sections and keys."""
    parser = configparser.ConfigParser(interpolation=None)
    with open(path, encoding="utf-8") as fh:
        try:
            parser.read_file(fh)
        except configparser.Error as e:
            raise ConfigError(f"cannot parse config file {path}: {e}") from None
    out: dict[str, dict[str, str]] = {}
    for section in parser.sections():
        if section not in _CONFIG_SCHEMA:
            raise ConfigError(f"{path}: unknown config section [{section}]")
        for key in parser[section]:
            if key not in _CONFIG_SCHEMA[section]:
                raise ConfigError(
                    f"{path}: unknown key {key!r} in section [{section}]"
                )
        out[section] = dict(parser[section])
    return out


_TRAIN_FIELD_PARSERS = {
    "epochs": _parse_int,
    "learning_rate": _parse_float,
    "heads": _parse_int,
    "hidden_fraction": _parse_float,
    "k_neighbors": _parse_int,
    "graph_kind": lambda raw, name: raw.strip(),
    "variant": lambda raw, name: raw.strip(),
    "seed": _parse_int,
    "dropout": _parse_float,
    "standardize": _parse_bool,
    "binary_single_logit": _parse_bool,
}


def build_experiment_config(config_path, args) -> ExperimentConfig:
    """Merge defaults, the config file, and flag overrides (flags win)."""
    file_cfg = read_config_file(config_path) if config_path else {}

    train_kwargs = {}
    for key, raw in file_cfg.get("train", {}).items():
        train_kwargs[key] = _TRAIN_FIELD_PARSERS[key](raw, f"train.{key}")

    sweep_cfg = file_cfg.get("sweep", {})
    levels = list(DEFAULT_LEVELS)
    if "levels" in sweep_cfg:
        levels = _parse_levels(sweep_cfg["levels"], "sweep.levels")
    methods = list(METHODS)
    if "methods" in sweep_cfg:
        methods = _parse_list(sweep_cfg["methods"])
    folds = _parse_int(sweep_cfg["folds"], "sweep.folds") if "folds" in sweep_cfg else 10
    jobs = _parse_int(sweep_cfg["jobs"], "sweep.jobs") if "jobs" in sweep_cfg else None

    dataset = file_cfg.get("data", {}).get("dataset")

    # flag overrides
    for key in _TRAIN_FIELD_PARSERS:
        value = getattr(args, key, None)
        if value is not None:
            train_kwargs[key] = value
    if getattr(args, "levels", None) is not None:
        levels = _parse_levels(args.levels, "--levels")
    if getattr(args, "methods", None) is not None:
        methods = _parse_list(args.methods)
    if getattr(args, "folds", None) is not None:
        folds = args.folds
    if getattr(args, "jobs", None) is not None:
        jobs = args.jobs
    if getattr(args, "dataset", None) is not None:
        dataset = args.dataset
    if dataset is None:
        raise ConfigError(
            "no dataset given: set [data] dataset in the config or pass --dataset"
        )

    out_dir = _resolve_out(getattr(args, "out", None),
                           file_cfg.get("output", {}).get("directory"))
    return ExperimentConfig(
        dataset=dataset,
        train=TrainConfig(**train_kwargs),
        levels=levels,
        methods=methods,
        folds=folds,
        jobs=jobs,
        out_dir=out_dir,
    )


def _resolve_out(flag_value, config_value=None) -> Path:
    out = flag_value or config_value or os.environ.get(OUT_ENV_VAR) or DEFAULT_OUT
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_prepare_mnist(args) -> int:
    ds = mnist_dataset(args.images, args.labels, per_class=args.per_class)
    out = _resolve_out(args.out)
    write_multimodal_csv(ds, out / "dataset.csv")
    write_mask_csv(ds, out / "mask.csv")
    print(f"wrote {out / 'dataset.csv'} and {out / 'mask.csv'} "
          f"({ds.num_nodes} nodes, {ds.num_modalities} modalities)")
    return 0


def cmd_simulate(args) -> int:
    ds = load_multimodal_csv(args.dataset)
    masked = simulate_blockwise_missing(ds, args.p, make_rng(args.seed))
    out = _resolve_out(args.out)
    write_multimodal_csv(masked, out / "dataset.csv")
    write_mask_csv(masked, out / "mask.csv")
    dropped = int((~masked.mask).sum())
    print(f"wrote {out / 'dataset.csv'} and {out / 'mask.csv'} "
          f"({dropped} of {masked.num_nodes} nodes lost one modality)")
    return 0


def cmd_build_graphs(args) -> int:
    ds = load_multimodal_csv(args.dataset)
    out = _resolve_out(args.out)
    for m in range(ds.num_modalities):
        available = ds.mask[:, m]
        if args.kind == "nn":
            g = knn_graph(ds.features[m], args.k, available=available)
        else:
            g = fc_graph(ds.num_nodes, available=available)
        path = out / f"graph_m{m + 1}.edges"
        write_edgelist(g, path)
        print(f"wrote {path} ({g.num_edges} edges)")
    return 0


def _smoke_subset(ds, per_class: int):
    taken: dict[int, int] = {}
    keep = []
    for i, y in enumerate(ds.labels):
        y = int(y)
        if taken.get(y, 0) < per_class:
            taken[y] = taken.get(y, 0) + 1
            keep.append(i)
    return ds.subset(np.asarray(keep, dtype=np.int64))


def cmd_cv(args) -> int:
    exp = build_experiment_config(args.config, args)
    ds = load_multimodal_csv(exp.dataset)
    if args.smoke:
        ds = _smoke_subset(ds, per_class=200)
        exp = replace(exp, folds=3, train=replace(exp.train, epochs=50))
        print(f"smoke run: {ds.num_nodes} nodes, 3 folds, 50 epochs")
    jobs = exp.jobs if exp.jobs is not None else (os.cpu_count() or 1)
    report = run_sweep(ds, exp.levels, exp.methods, exp.train,
                       folds=exp.folds, jobs=jobs)
    (exp.out_dir / "metrics.csv").write_text(report.to_csv_text(),
                                             encoding="utf-8")
    (exp.out_dir / "report.txt").write_text(report.to_text(), encoding="utf-8")
    write_accuracy_plot(report, exp.out_dir / "accuracy_vs_missingness.svg")
    for method in report.methods:
        series = " ".join(f"{v:.4f}" for v in report.accuracy_series(method))
        print(f"{method:<10} mean accuracy by level: {series}")
    print(f"wrote metrics.csv, report.txt, accuracy_vs_missingness.svg in {exp.out_dir}")
    return 0


def cmd_train(args) -> int:
    exp = build_experiment_config(args.config, args)
    ds = load_multimodal_csv(exp.dataset)
    model, losses = train_full(ds, exp.train)
    path = exp.out_dir / "model.npz"
    save_model(path, model, extra={
        "config": asdict(exp.train),
        "feature_dims": list(ds.feature_dims),
        "num_classes": ds.num_classes,
        "trained_nodes": ds.num_nodes,
    })
    print(f"trained {exp.train.epochs} epochs, final loss {losses[-1]:.6f}")
    print(f"wrote {path}")
    return 0


def cmd_evaluate(args) -> int:
    model, extra = load_model(args.checkpoint)
    cfg_raw = extra.get("config")
    if not isinstance(cfg_raw, dict):
        raise FormatError(
            f"{args.checkpoint}: checkpoint lacks an embedded training config"
        )
    try:
        config = TrainConfig(**cfg_raw)
    except TypeError:
        raise FormatError(
            f"{args.checkpoint}: embedded training config has unknown fields"
        ) from None
    train_ds = load_multimodal_csv(args.train_dataset)
    expected_dims = extra.get("feature_dims")
    if expected_dims is not None and list(train_ds.feature_dims) != list(expected_dims):
        raise ConfigError(
            f"training dataset feature widths {train_ds.feature_dims} do not "
            f"match the checkpoint's {list(expected_dims)}"
        )
    eval_ds = load_multimodal_csv(args.dataset)
    logits = inductive_logits(model, train_ds, eval_ds, config)
    preds = predict_labels(logits)

    out = _resolve_out(args.out)
    path = out / "predictions.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label", "prediction"]
                        + [f"score_{c}" for c in range(logits.shape[1])])
        for i, node_id in enumerate(eval_ds.ids):
            writer.writerow([node_id, int(eval_ds.labels[i]), int(preds[i])]
                            + [repr(float(v)) for v in logits[i]])
    print(f"wrote {path}")
    print(f"accuracy {accuracy(preds, eval_ds.labels):.4f}")
    try:
        print(f"auc {auc_from_logits(logits, eval_ds.labels):.4f}")
    except GatFusionError as e:
        print(f"auc undefined: {e}")
    return 0


_KINK_MARGIN = 1e-3


def _layer_margin(layer, cache) -> float:
    # Distance of the nearest LeakyReLU/ELU input to its kink at 0. The
    # central-difference probe steps by 1e-5, so anything closer than the
    # margin risks crossing the kink and spoiling the comparison.
    f = layer.head_dim
    margin = np.inf
    for i, head in enumerate(layer.heads):
        z = cache.z_all[:, i * f:(i + 1) * f]
        scores = ((z @ head.a[:f])[cache.graph.dst]
                  + (z @ head.a[f:])[cache.graph.src])
        if scores.size:
            margin = min(margin, float(np.abs(scores).min()))
    if layer.activation == "elu":
        pre = cache.pre[cache.graph.connected]
        if pre.size:
            margin = min(margin, float(np.abs(pre).min()))
    return margin


def _branch_margin(branch, cache) -> float:
    margin = _layer_margin(branch.layer1, cache.cache1)
    if branch.variant == "gat2":
        margin = min(margin, _layer_margin(branch.layer2, cache.cache2))
    else:
        pre = cache.mlp_pre[cache.connected]
        if pre.size:
            margin = min(margin, float(np.abs(pre).min()))
    return margin


def run_gradient_suite(seed: int = 0, inject_fault: bool = False
                       ) -> list[tuple[str, float]]:
    """Finite-difference checks over every gradient path.

    Covers a bare attention head, both combine modes at 1, 2, and 8 heads,
    both branch variants, and a 3-branch fusion model with a random
    availability mask, all on small random graphs. Returns (name, max
    relative error) pairs. `inject_fault` corrupts the first component's
    analytic gradient, a negative control proving the checker can fail.

    Probe instances are conditioned deterministically: draws whose
    activations land within 1e-3 of a kink are rejected and redrawn, and
    probe losses are scaled small so rounding noise stays far below the
    checker's relative-error floor.
    """
    rng = make_rng(seed)
    n = 12
    graph = knn_graph(rng.normal(size=(n, 4)), 3)
    h = rng.normal(size=(n, 5))
    results: list[tuple[str, float]] = []
    scale = 3e-4

    def check_layer(name, heads, combine, activation):
        while True:
            layer = init_gat_layer(5, 3, heads, combine, activation, rng)
            _, cache = layer_forward(layer, h, graph)
            if _layer_margin(layer, cache) >= _KINK_MARGIN:
                break
        params = layer_params(layer, "layer")
        weights = rng.normal(size=(n, layer.out_dim)) * scale
        fault = inject_fault and not results  # first component only

        def loss_and_grads():
            out, cache = layer_forward(layer, h, graph)
            grad_w, grad_a, _ = layer_backward(layer, cache, weights)
            grads = {}
            for i, (w, a) in enumerate(zip(grad_w, grad_a)):
                grads[f"layer.head{i}.W"] = w * 1.01 if fault else w
                grads[f"layer.head{i}.a"] = a
            return float(np.sum(out * weights)), grads

        results.append((name, finite_difference_check(loss_and_grads, params)))

    check_layer("head", 1, "mean", "identity")
    for combine in ("mean", "concat"):
        for heads in (1, 2, 8):
            check_layer(f"layer-{combine}-k{heads}", heads, combine, "elu")

    def check_branch(variant):
        while True:
            branch = init_branch(variant, 5, 3, 2, 0.5, rng)
            _, cache = branch_forward(branch, h, graph)
            if _branch_margin(branch, cache) >= _KINK_MARGIN:
                break
        params = branch_params(branch, "b.")
        weights = rng.normal(size=(n, 3)) * scale

        def loss_and_grads():
            logits, cache = branch_forward(branch, h, graph)
            grads = branch_backward(branch, cache, weights, prefix="b.")
            return float(np.sum(logits * weights)), grads

        results.append((f"branch-{variant}",
                        finite_difference_check(loss_and_grads, params)))

    check_branch("gat2")
    check_branch("gat1")

    dims = [5, 4, 3]
    feats = [rng.normal(size=(n, d)) for d in dims]
    mask = rng.random((n, len(dims))) < 0.7
    mask[~mask.any(axis=1), 0] = True
    for m in range(len(dims)):
        if mask[:, m].sum() < 5:
            mask[:5, m] = True
        feats[m][~mask[:, m]] = 0.0
    graphs = [knn_graph(feats[m], 3, available=mask[:, m])
              for m in range(len(dims))]
    labels = rng.integers(0, 3, size=n)
    while True:
        model = init_fusion_model("gat2", dims, 3, 2, 0.5, rng)
        _, fcache = fused_forward(model, feats, graphs, mask)
        if min(_branch_margin(b, c) for b, c in
               zip(model.branches, fcache.caches)) >= _KINK_MARGIN:
            break
    params = model_params(model)
    subset = np.arange(n)

    def fusion_loss():
        loss, grads, _ = fusion_loss_and_grads(model, feats, graphs, mask,
                                               labels, subset)
        return loss * scale, {k: g * scale for k, g in grads.items()}

    results.append(("fusion-3branch",
                    finite_difference_check(fusion_loss, params)))
    return results


def cmd_gradcheck(args) -> int:
    results = run_gradient_suite(args.seed, inject_fault=args.inject_fault)
    failed = False
    for name, err in results:
        ok = np.isfinite(err) and err < GRAD_TOLERANCE
        failed = failed or not ok
        print(f"{name:<16} {'ok  ' if ok else 'FAIL'} max rel err {err:.3e}")
    print(f"{len(results)} components checked against central differences "
          f"(threshold {GRAD_TOLERANCE:.0e})")
    return 1 if failed else 0


def _add_experiment_flags(parser: argparse.ArgumentParser, sweep: bool) -> None:
    parser.add_argument("--config", default=None,
                        help="INI config file; flags override its values")
    parser.add_argument("--dataset", default=None, help="multi-modal CSV path")
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--learning-rate", dest="learning_rate", type=float,
                        default=None)
    parser.add_argument("--heads", type=int, default=None)
    parser.add_argument("--hidden-fraction", dest="hidden_fraction",
                        type=float, default=None)
    parser.add_argument("--k-neighbors", dest="k_neighbors", type=int,
                        default=None)
    parser.add_argument("--graph-kind", dest="graph_kind",
                        choices=["nn", "mi", "fc"], default=None)
    parser.add_argument("--variant", choices=["gat2", "gat1"], default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--dropout", type=float, default=None)
    parser.add_argument("--standardize", dest="standardize", default=None,
                        type=lambda raw: _parse_bool(raw, "--standardize"),
                        metavar="BOOL")
    parser.add_argument("--binary-single-logit", dest="binary_single_logit",
                        default=None,
                        type=lambda raw: _parse_bool(raw, "--binary-single-logit"),
                        metavar="BOOL")
    parser.add_argument("--out", default=None, help="output directory")
    if sweep:
        parser.add_argument("--levels", default=None,
                            help="missingness levels, e.g. '0.1 0.3 0.5'")
        parser.add_argument("--methods", default=None,
                            help=f"subset of {','.join(METHODS)}")
        parser.add_argument("--folds", type=int, default=None)
        parser.add_argument("--jobs", type=int, default=None,
                            help="parallel fold workers (default: cpu count)")
        parser.add_argument("--smoke", action="store_true",
                            help="quick check: 200 nodes/class, 3 folds, 50 epochs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gatfusion",
        description="Multi-modal graph-attention fusion experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-mnist",
                       help="turn IDX image/label files into the 3-crop CSV")
    p.add_argument("--images", required=True, help="IDX image file")
    p.add_argument("--labels", required=True, help="IDX label file")
    p.add_argument("--per-class", dest="per_class", type=int, default=1000)
    p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("simulate", help="drop one modality from a node fraction")
    p.add_argument("--dataset", required=True)
    p.add_argument("--p", type=float, required=True,
                   help="fraction of nodes losing one modality")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)

    p = sub.add_parser("build-graphs",
                       help="export per-modality graphs as edge lists")
    p.add_argument("--dataset", required=True)
    p.add_argument("--kind", choices=["nn", "fc"], default="nn")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--out", default=None)

    p = sub.add_parser("cv", help="cross-validated missingness sweep")
    _add_experiment_flags(p, sweep=True)

    p = sub.add_parser("train", help="train one model on a full dataset")
    _add_experiment_flags(p, sweep=False)

    p = sub.add_parser("evaluate",
                       help="score a dataset with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train-dataset", dest="train_dataset", required=True,
                   help="CSV the checkpoint was trained on (rebuilds graphs)")
    p.add_argument("--dataset", required=True, help="CSV of rows to score")
    p.add_argument("--out", default=None)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", dest="inject_fault", action="store_true",
                   help="corrupt one gradient to prove the checker trips")

    return parser


_COMMANDS = {
    "prepare-mnist": cmd_prepare_mnist,
    "simulate": cmd_simulate,
    "build-graphs": cmd_build_graphs,
    "cv": cmd_cv,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except FileNotFoundError as e:
        name = e.filename if e.filename else e
        print(f"error: no such file: {name}", file=sys.stderr)
        return 1
    except GatFusionError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
