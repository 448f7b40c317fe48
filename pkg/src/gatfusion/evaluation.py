"""Training loops, stratified cross-validation, and classification metrics.

The centerpiece is an inductive per-fold protocol: graphs are built from
training rows alone, the model never sees a test row during optimization,
and held-out nodes are attached to the frozen training graphs for a single
evaluation pass at the end.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .data import MultiModalDataset, mean_impute, simulate_blockwise_missing, standardize
from .errors import (
    ConfigError,
    GatFusionError,
    ShapeError,
    UndefinedMetricError,
    ValidationError,
)
from .fusion import (
    FusionModel,
    fused_forward,
    fusion_loss_and_grads,
    init_fusion_model,
    logistic_predict,
    make_gatimp_model,
    model_params,
    train_logistic,
)
from .graphs import Graph, attach_test_nodes, fc_graph, knn_graph
from .numerics import AdamState, adam_step, as_matrix, make_rng, softmax

GRAPH_KINDS = ("nn", "mi", "fc")
VARIANTS = ("gat2", "gat1")
METHODS = ("gat2", "gat1", "gatimp", "logistic")


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one cross-validation run.

    `binary_single_logit` switches 2-class problems from the default
    two-column softmax head to a single sigmoid logit. `standardize`
    z-scores features per fold using train-row statistics.
    """

    epochs: int = 200
    learning_rate: float = 1e-3
    heads: int = 8
    hidden_fraction: float = 0.5
    k_neighbors: int = 10
    graph_kind: str = "nn"
    variant: str = "gat2"
    seed: int = 0
    dropout: float = 0.0
    standardize: bool = False
    binary_single_logit: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be at least 1, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if self.heads < 1:
            raise ConfigError(f"heads must be at least 1, got {self.heads}")
        if not 0.0 < self.hidden_fraction <= 1.0:
            raise ConfigError(
                f"hidden fraction must lie in (0, 1], got {self.hidden_fraction}"
            )
        if self.k_neighbors < 1:
            raise ConfigError(f"k neighbors must be at least 1, got {self.k_neighbors}")
        if self.graph_kind not in GRAPH_KINDS:
            raise ConfigError(
                f"graph kind must be one of {GRAPH_KINDS}, got {self.graph_kind!r}"
            )
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")


@dataclass(frozen=True)
class FoldSplit:
    """One train/test partition of node ids."""

    index: int
    train_ids: np.ndarray
    test_ids: np.ndarray


def stratified_kfold(labels, folds: int, seed) -> list[FoldSplit]:
    """Partition nodes into `folds` test sets with per-class balance.

    Each class is shuffled with the seeded generator and dealt round-robin
    into folds; the dealing pointer carries over between classes, so every
    fold receives floor or ceil of both the per-class share and the global
    share. Ids inside each split come back sorted.
    """
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.size == 0:
        raise ValidationError("labels must be a non-empty 1-D array")
    if folds < 2:
        raise ConfigError(f"cross-validation needs at least 2 folds, got {folds}")
    rng = make_rng(seed)
    buckets: list[list[int]] = [[] for _ in range(folds)]
    pointer = 0
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if members.size < folds:
            raise ValidationError(
                f"class {c} has {members.size} members, fewer than {folds} folds"
            )
        for idx in members[rng.permutation(members.size)]:
            buckets[pointer % folds].append(int(idx))
            pointer += 1
    all_ids = np.arange(labels.size, dtype=np.int64)
    splits = []
    for f in range(folds):
        test = np.sort(np.asarray(buckets[f], dtype=np.int64))
        train = np.setdiff1d(all_ids, test)
        splits.append(FoldSplit(index=f, train_ids=train, test_ids=test))
    return splits


def accuracy(predictions, labels) -> float:
    """Fraction of exact matches between two label vectors."""
    preds = np.asarray(predictions)
    labels = np.asarray(labels)
    if preds.ndim != 1 or labels.ndim != 1 or preds.shape != labels.shape:
        raise ShapeError(
            f"predictions and labels must be 1-D and equal length, "
            f"got {preds.shape} and {labels.shape}"
        )
    if preds.size == 0:
        raise ValidationError("accuracy over zero nodes is undefined")
    return float(np.mean(preds == labels))


def predict_labels(logits) -> np.ndarray:
    """Class decisions from logits: argmax, ties to the lowest class index.

    A single-column input is a sigmoid logit; class 1 wins at or above 0.
    """
    logits = as_matrix(logits)
    if logits.shape[1] == 1:
        return (logits[:, 0] >= 0).astype(np.int64)
    return np.argmax(logits, axis=1).astype(np.int64)


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    # 1-based ranks with ties sharing the mean of their run.
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    n = scores.size
    boundaries = np.flatnonzero(sorted_scores[1:] != sorted_scores[:-1]) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [n]])
    ranks = np.empty(n)
    ranks[order] = np.repeat((starts + ends + 1) / 2.0, ends - starts)
    return ranks


def roc_auc(scores, labels) -> float:
    """P(positive score > negative score) + half the tie probability.

    Computed from tie-averaged ranks, which equals the brute-force average
    over all positive/negative pairs.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 1 or labels.ndim != 1 or scores.shape != labels.shape:
        raise ShapeError("scores and labels must be 1-D and equal length")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValidationError("roc_auc labels must be 0 or 1")
    if not np.all(np.isfinite(scores)):
        raise ValidationError("roc_auc scores must be finite")
    n_pos = int(np.sum(labels == 1))
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            "ROC-AUC needs at least one positive and one negative label"
        )
    ranks = _average_ranks(scores)
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auc_from_logits(logits, labels) -> float:
    """ROC-AUC from model outputs.

    One column: the raw sigmoid logit is the score. Two columns: the
    softmax probability of class 1. More: macro average of one-vs-rest
    AUCs over softmax probabilities.
    """
    logits = as_matrix(logits)
    labels = np.asarray(labels)
    if logits.shape[1] == 1:
        return roc_auc(logits[:, 0], labels)
    probs = softmax(logits)
    if logits.shape[1] == 2:
        return roc_auc(probs[:, 1], (labels == 1).astype(np.int64))
    per_class = []
    for c in range(logits.shape[1]):
        binary = (labels == c).astype(np.int64)
        try:
            per_class.append(roc_auc(probs[:, c], binary))
        except UndefinedMetricError:
            raise UndefinedMetricError(
                f"macro ROC-AUC undefined: class {c} is absent or universal"
            ) from None
    return float(np.mean(per_class))


@dataclass
class FoldResult:
    """Metrics and artifacts from one train/evaluate cycle."""

    fold_index: int
    method: str
    accuracy: float
    auc: float
    losses: list[float]
    model: object | None = None


def _output_dim(num_classes: int, config: TrainConfig) -> int:
    if config.binary_single_logit:
        if num_classes != 2:
            raise ConfigError(
                f"single-logit mode needs exactly 2 classes, got {num_classes}"
            )
        return 1
    return num_classes


def _build_graph(kind: str, feats: np.ndarray, k: int, available) -> Graph:
    if kind == "nn":
        return knn_graph(feats, k, available=available)
    if kind == "fc":
        return fc_graph(feats.shape[0], available=available)
    raise ConfigError(
        "metadata graphs need side information per node; build them with "
        "mi_graph and drive training through the library API"
    )


def _attach_k(kind: str, k: int, train_available: np.ndarray) -> int:
    # Fully-connected evaluation attaches to every available training node.
    if kind == "fc":
        return int(train_available.sum())
    return k


def _validate_split(dataset: MultiModalDataset, split: FoldSplit) -> None:
    train = np.asarray(split.train_ids)
    test = np.asarray(split.test_ids)
    if train.size == 0 or test.size == 0:
        raise ValidationError("fold split needs non-empty train and test sides")
    if np.intersect1d(train, test).size:
        raise ValidationError("fold split train and test ids overlap")
    if np.unique(dataset.labels[train]).size < 2:
        raise ValidationError("degenerate fold: training rows hold a single class")


def _fold_views(dataset: MultiModalDataset, split: FoldSplit,
                config: TrainConfig) -> tuple[MultiModalDataset, int]:
    # Reindex so rows [0, n_train) are the training fold.
    _validate_split(dataset, split)
    order = np.concatenate([
        np.asarray(split.train_ids, dtype=np.int64),
        np.asarray(split.test_ids, dtype=np.int64),
    ])
    ds = dataset.subset(order)
    n_train = int(np.asarray(split.train_ids).size)
    if config.standardize:
        ds = standardize(ds, np.arange(n_train))
    return ds, n_train


def _input_dropout(x: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    keep = rng.random(x.shape) >= rate
    return x * keep / (1.0 - rate)


def train_fold(dataset: MultiModalDataset, split: FoldSplit,
               config: TrainConfig) -> FoldResult:
    """Train a fusion model on one fold and evaluate it inductively.

    Per-modality graphs are built from training rows only; after
    `config.epochs` full-batch Adam steps the held-out rows are attached
    to those graphs and scored in a single forward pass.
    """
    ds, n_train = _fold_views(dataset, split, config)
    out_dim = _output_dim(ds.num_classes, config)
    train_mask = ds.mask[:n_train]
    train_feats = [f[:n_train] for f in ds.features]
    graphs = [
        _build_graph(config.graph_kind, train_feats[m], config.k_neighbors,
                     train_mask[:, m])
        for m in range(ds.num_modalities)
    ]

    rng = make_rng((config.seed, split.index))
    model = init_fusion_model(config.variant, ds.feature_dims, out_dim,
                              config.heads, config.hidden_fraction, rng)
    params = model_params(model)
    state = AdamState()
    labels_train = ds.labels[:n_train]
    subset = np.arange(n_train)
    losses = []
    for _ in range(config.epochs):
        feats = train_feats
        if config.dropout > 0.0:
            feats = [_input_dropout(f, config.dropout, rng) for f in feats]
        loss, grads, _ = fusion_loss_and_grads(
            model, feats, graphs, train_mask, labels_train, subset)
        losses.append(loss)
        adam_step(params, grads, state, config.learning_rate)

    eval_graphs = [
        attach_test_nodes(
            graphs[m], train_feats[m], ds.features[m][n_train:],
            _attach_k(config.graph_kind, config.k_neighbors, train_mask[:, m]),
            train_mask[:, m], ds.mask[n_train:, m])
        for m in range(ds.num_modalities)
    ]
    fused, _ = fused_forward(model, ds.features, eval_graphs, ds.mask)
    test_logits = fused[n_train:]
    labels_test = ds.labels[n_train:]
    return FoldResult(
        fold_index=split.index,
        method=config.variant,
        accuracy=accuracy(predict_labels(test_logits), labels_test),
        auc=auc_from_logits(test_logits, labels_test),
        losses=losses,
        model=model,
    )


def train_fold_gatimp(dataset: MultiModalDataset, split: FoldSplit,
                      config: TrainConfig) -> FoldResult:
    """Imputation baseline fold: mean-impute, stack, train one branch.

    Missing blocks are filled with train-row column means, so every node is
    available on the single stacked modality and one graph serves all.
    """
    ds, n_train = _fold_views(dataset, split, config)
    out_dim = _output_dim(ds.num_classes, config)
    stacked = mean_impute(ds, np.arange(n_train))
    train_x = stacked[:n_train]
    graph = _build_graph(config.graph_kind, train_x, config.k_neighbors, None)

    rng = make_rng((config.seed, split.index))
    model = make_gatimp_model(stacked.shape[1], out_dim, config.heads,
                              config.hidden_fraction, rng)
    params = model_params(model)
    state = AdamState()
    labels_train = ds.labels[:n_train]
    subset = np.arange(n_train)
    train_mask = np.ones((n_train, 1), dtype=bool)
    losses = []
    for _ in range(config.epochs):
        x = train_x
        if config.dropout > 0.0:
            x = _input_dropout(x, config.dropout, rng)
        loss, grads, _ = fusion_loss_and_grads(
            model, [x], [graph], train_mask, labels_train, subset)
        losses.append(loss)
        adam_step(params, grads, state, config.learning_rate)

    all_avail = np.ones(n_train, dtype=bool)
    eval_graph = attach_test_nodes(
        graph, train_x, stacked[n_train:],
        _attach_k(config.graph_kind, config.k_neighbors, all_avail))
    fused, _ = fused_forward(
        model, [stacked], [eval_graph],
        np.ones((stacked.shape[0], 1), dtype=bool))
    test_logits = fused[n_train:]
    labels_test = ds.labels[n_train:]
    return FoldResult(
        fold_index=split.index,
        method="gatimp",
        accuracy=accuracy(predict_labels(test_logits), labels_test),
        auc=auc_from_logits(test_logits, labels_test),
        losses=losses,
        model=model,
    )


def train_fold_logistic(dataset: MultiModalDataset, split: FoldSplit,
                        config: TrainConfig) -> FoldResult:
    """Graph-free baseline fold: logistic regression on imputed features."""
    ds, n_train = _fold_views(dataset, split, config)
    stacked = mean_impute(ds, np.arange(n_train))
    model, losses = train_logistic(
        stacked[:n_train], ds.labels[:n_train], ds.num_classes,
        epochs=config.epochs, lr=config.learning_rate)
    logits = logistic_predict(model, stacked[n_train:])
    labels_test = ds.labels[n_train:]
    return FoldResult(
        fold_index=split.index,
        method="logistic",
        accuracy=accuracy(predict_labels(logits), labels_test),
        auc=auc_from_logits(logits, labels_test),
        losses=losses,
        model=model,
    )


def run_fold(dataset: MultiModalDataset, split: FoldSplit, config: TrainConfig,
             method: str) -> FoldResult:
    """Dispatch one fold to the named method."""
    if method in VARIANTS:
        return train_fold(dataset, split, replace(config, variant=method))
    if method == "gatimp":
        return train_fold_gatimp(dataset, split, config)
    if method == "logistic":
        return train_fold_logistic(dataset, split, config)
    raise ConfigError(f"method must be one of {METHODS}, got {method!r}")


def train_full(dataset: MultiModalDataset, config: TrainConfig
               ) -> tuple[FusionModel, list[float]]:
    """Train a fusion model on every node of the dataset (no held-out rows)."""
    ds = dataset
    if np.unique(ds.labels).size < 2:
        raise ValidationError("training needs at least two classes present")
    if config.standardize:
        ds = standardize(ds, np.arange(ds.num_nodes))
    out_dim = _output_dim(ds.num_classes, config)
    graphs = [
        _build_graph(config.graph_kind, ds.features[m], config.k_neighbors,
                     ds.mask[:, m])
        for m in range(ds.num_modalities)
    ]
    rng = make_rng(config.seed)
    model = init_fusion_model(config.variant, ds.feature_dims, out_dim,
                              config.heads, config.hidden_fraction, rng)
    params = model_params(model)
    state = AdamState()
    subset = np.arange(ds.num_nodes)
    losses = []
    for _ in range(config.epochs):
        feats = ds.features
        if config.dropout > 0.0:
            feats = [_input_dropout(f, config.dropout, rng) for f in feats]
        loss, grads, _ = fusion_loss_and_grads(
            model, feats, graphs, ds.mask, ds.labels, subset)
        losses.append(loss)
        adam_step(params, grads, state, config.learning_rate)
    return model, losses


def _concat_datasets(train: MultiModalDataset,
                     other: MultiModalDataset) -> MultiModalDataset:
    if train.num_modalities != other.num_modalities:
        raise ValidationError(
            f"modality counts differ: {train.num_modalities} vs {other.num_modalities}"
        )
    if train.feature_dims != other.feature_dims:
        raise ValidationError(
            f"feature widths differ: {train.feature_dims} vs {other.feature_dims}"
        )
    return MultiModalDataset(
        features=[np.vstack([a, b]) for a, b in zip(train.features, other.features)],
        mask=np.vstack([train.mask, other.mask]),
        labels=np.concatenate([train.labels, other.labels]),
        num_classes=max(train.num_classes, other.num_classes),
        ids=list(train.ids) + list(other.ids),
        feature_names=train.feature_names,
    )


def inductive_logits(model: FusionModel, train_dataset: MultiModalDataset,
                     eval_dataset: MultiModalDataset,
                     config: TrainConfig) -> np.ndarray:
    """Score new rows against a model trained on `train_dataset`.

    Rebuilds the training graphs exactly as `train_full` did (including
    standardization statistics from the training rows), attaches the new
    rows, and returns their fused logits. Feature widths must match; ids
    must not collide with training ids.
    """
    ds = _concat_datasets(train_dataset, eval_dataset)
    n_train = train_dataset.num_nodes
    if config.standardize:
        ds = standardize(ds, np.arange(n_train))
    train_feats = [f[:n_train] for f in ds.features]
    train_mask = ds.mask[:n_train]
    graphs = [
        _build_graph(config.graph_kind, train_feats[m], config.k_neighbors,
                     train_mask[:, m])
        for m in range(ds.num_modalities)
    ]
    eval_graphs = [
        attach_test_nodes(
            graphs[m], train_feats[m], ds.features[m][n_train:],
            _attach_k(config.graph_kind, config.k_neighbors, train_mask[:, m]),
            train_mask[:, m], ds.mask[n_train:, m])
        for m in range(ds.num_modalities)
    ]
    fused, _ = fused_forward(model, ds.features, eval_graphs, ds.mask)
    return fused[n_train:]


@dataclass(frozen=True)
class SweepCell:
    """Per-fold metrics for one (method, missingness level) pair."""

    method: str
    level: float
    fold_accuracies: tuple[float, ...]
    fold_aucs: tuple[float, ...]

    @property
    def accuracy_mean(self) -> float:
        return float(np.mean(self.fold_accuracies))

    @property
    def accuracy_std(self) -> float:
        return float(np.std(self.fold_accuracies))

    @property
    def auc_mean(self) -> float:
        return float(np.mean(self.fold_aucs))

    @property
    def auc_std(self) -> float:
        return float(np.std(self.fold_aucs))


@dataclass(frozen=True)
class MetricsReport:
    """Cross-validation results over a missingness sweep.

    Cells are ordered level-major, method-minor, matching the run order.
    """

    graph_kind: str
    levels: tuple[float, ...]
    methods: tuple[str, ...]
    folds: int
    cells: tuple[SweepCell, ...]

    def cell(self, method: str, level: float) -> SweepCell:
        for c in self.cells:
            if c.method == method and c.level == level:
                return c
        raise KeyError(f"no cell for method {method!r} at level {level}")

    def accuracy_series(self, method: str) -> list[float]:
        """Mean accuracy per level, in level order."""
        return [self.cell(method, lvl).accuracy_mean for lvl in self.levels]

    def to_csv_text(self) -> str:
        lines = ["method,level,fold,accuracy,auc"]
        for c in self.cells:
            for f, (acc, auc) in enumerate(zip(c.fold_accuracies, c.fold_aucs)):
                lines.append(
                    f"{c.method},{repr(float(c.level))},{f},"
                    f"{repr(float(acc))},{repr(float(auc))}"
                )
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        out = [
            "cross-validation report",
            f"graph kind: {self.graph_kind}",
            f"folds: {self.folds}",
            f"levels: {' '.join(repr(float(l)) for l in self.levels)}",
            f"methods: {' '.join(self.methods)}",
            "",
        ]
        for c in self.cells:
            out.append(f"method {c.method} | graph {self.graph_kind} | level {c.level}")
            out.append("  fold accuracy: "
                       + " ".join(f"{v:.4f}" for v in c.fold_accuracies))
            out.append("  fold auc:      "
                       + " ".join(f"{v:.4f}" for v in c.fold_aucs))
            out.append(f"  accuracy mean {c.accuracy_mean:.4f} std {c.accuracy_std:.4f}")
            out.append(f"  auc      mean {c.auc_mean:.4f} std {c.auc_std:.4f}")
            out.append("")
        return "\n".join(out)


def _sweep_fold_metrics(dataset: MultiModalDataset, split: FoldSplit,
                        config: TrainConfig, method: str) -> tuple[float, float]:
    # Worker for process pools: ship back plain floats, not models.
    result = run_fold(dataset, split, config, method)
    return result.accuracy, result.auc


def _with_context(exc: GatFusionError, method: str, level: float,
                  fold: int) -> GatFusionError:
    return type(exc)(f"method {method}, level {level}, fold {fold}: {exc}")


def run_sweep(dataset: MultiModalDataset, levels, methods, config: TrainConfig,
              folds: int = 10, jobs: int = 1) -> MetricsReport:
    """Cross-validate every method at every missingness level.

    Starts from a complete dataset; level i is simulated with seed
    ``config.seed + i`` so levels are independent draws. Fold splits are
    shared across levels and methods. `jobs` > 1 fans folds out to worker
    processes; results are reduced in fold order either way, so the report
    does not depend on scheduling.
    """
    if not dataset.is_complete():
        raise ValidationError("the sweep needs a complete dataset to start from")
    levels = [float(p) for p in levels]
    if not levels:
        raise ConfigError("at least one missingness level is required")
    for p in levels:
        if not 0.0 <= p < 1.0:
            raise ValidationError(f"missingness level must lie in [0, 1), got {p}")
    methods = list(methods)
    if not methods:
        raise ConfigError("at least one method is required")
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {m!r}")
    if jobs < 1:
        raise ConfigError(f"jobs must be at least 1, got {jobs}")

    splits = stratified_kfold(dataset.labels, folds, config.seed)
    level_datasets = [
        simulate_blockwise_missing(dataset, p, make_rng(config.seed + i))
        for i, p in enumerate(levels)
    ]

    pairs: dict[tuple[int, str], list[tuple[float, float]]] = {}
    if jobs == 1:
        for i, level_ds in enumerate(level_datasets):
            for method in methods:
                cell = []
                for split in splits:
                    try:
                        cell.append(_sweep_fold_metrics(level_ds, split, config, method))
                    except GatFusionError as e:
                        raise _with_context(e, method, levels[i], split.index) from e
                pairs[(i, method)] = cell
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {
                (i, method): [
                    pool.submit(_sweep_fold_metrics, level_ds, split, config, method)
                    for split in splits
                ]
                for i, level_ds in enumerate(level_datasets)
                for method in methods
            }
            for (i, method), futs in futures.items():
                cell = []
                for fold, f in enumerate(futs):
                    try:
                        cell.append(f.result())
                    except GatFusionError as e:
                        raise _with_context(e, method, levels[i], fold) from e
                pairs[(i, method)] = cell

    cells = []
    for i, p in enumerate(levels):
        for method in methods:
            folds_metrics = pairs[(i, method)]
            cells.append(SweepCell(
                method=method,
                level=p,
                fold_accuracies=tuple(acc for acc, _ in folds_metrics),
                fold_aucs=tuple(auc for _, auc in folds_metrics),
            ))
    return MetricsReport(
        graph_kind=config.graph_kind,
        levels=tuple(levels),
        methods=tuple(methods),
        folds=len(splits),
        cells=tuple(cells),
    )
