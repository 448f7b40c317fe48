"""Late fusion of per-modality branches under block-wise missingness.

Every modality gets its own branch and its own graph; a binary mask says
which (node, modality) pairs are real. Fused logits are the mean of the
available branches' logits (a node's missing branches contribute nothing,
structurally: their graphs disconnect the node, so the branch emits exact
zeros and receives exact zero gradient). A single softmax/sigmoid loss is
applied after fusion.

The mean-imputation baseline reuses the same machinery as a one-branch
model over stacked features, so the two routes cannot drift apart.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ShapeError, ValidationError
from .gat import (
    Branch,
    BranchCache,
    GatHead,
    GatLayer,
    MlpParams,
    branch_backward,
    branch_forward,
    branch_params,
    init_branch,
    load_params,
    save_params,
)
from .graphs import Graph
from .numerics import (
    AdamState,
    Matrix,
    adam_step,
    as_matrix,
    sigmoid_bce_with_logits,
    softmax_cross_entropy_with_logits,
)


@dataclass
class FusionModel:
    """One branch per modality plus the shared class count."""

    branches: list[Branch]
    num_classes: int

    @property
    def num_modalities(self) -> int:
        return len(self.branches)

    @property
    def feature_dims(self) -> list[int]:
        return [b.in_dim for b in self.branches]


def init_fusion_model(variant: str, feature_dims: list[int], num_classes: int,
                      heads: int, hidden_fraction: float,
                      rng: np.random.Generator,
                      leaky_slope: float = 0.2) -> FusionModel:
    """Initialize branches in modality order from a single generator."""
    if not feature_dims:
        raise ValidationError("at least one modality is required")
    branches = [
        init_branch(variant, dim, num_classes, heads, hidden_fraction, rng,
                    leaky_slope)
        for dim in feature_dims
    ]
    return FusionModel(branches=branches, num_classes=num_classes)


def model_params(model: FusionModel) -> dict[str, np.ndarray]:
    """Live references to every parameter, keyed branch{m}.<...>."""
    out: dict[str, np.ndarray] = {}
    for m, b in enumerate(model.branches):
        out.update(branch_params(b, prefix=f"branch{m}."))
    return out


def _check_mask(mask, n: int, num_modalities: int) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.shape != (n, num_modalities):
        raise ShapeError(
            f"mask must have shape ({n}, {num_modalities}), got {mask.shape}"
        )
    if not np.all((mask == 0) | (mask == 1)):
        raise ValidationError("mask entries must be 0 or 1")
    mask = mask.astype(bool)
    if np.any(~mask.any(axis=1)):
        bad = int(np.flatnonzero(~mask.any(axis=1))[0])
        raise ValidationError(f"node {bad} has no available modality")
    return mask


def combine_logits(logits_list: list[Matrix], mask: np.ndarray) -> Matrix:
    """Mean of the available branches' logits per node.

    Rows of `logits_list[m]` where ``mask[:, m]`` is 0 must already be
    zero (the branch contract); the mean divides by the availability
    count, not the branch count.
    """
    n = logits_list[0].shape[0]
    mask = _check_mask(mask, n, len(logits_list))
    total = np.zeros_like(logits_list[0])
    for m, logits in enumerate(logits_list):
        if logits.shape != logits_list[0].shape:
            raise ShapeError("branch logits must share one shape")
        total += logits
    counts = mask.sum(axis=1).astype(np.float64)
    return total / counts[:, None]


@dataclass
class FusionCache:
    caches: list[BranchCache]
    mask: np.ndarray
    counts: np.ndarray


def _validate_fusion_inputs(model: FusionModel, features, graphs, mask):
    m = model.num_modalities
    if len(features) != m or len(graphs) != m:
        raise ShapeError(
            f"expected {m} feature blocks and graphs, got "
            f"{len(features)} and {len(graphs)}"
        )
    feats = [as_matrix(f) for f in features]
    n = feats[0].shape[0]
    mask = _check_mask(mask, n, m)
    for i, (f, g) in enumerate(zip(feats, graphs)):
        if f.shape[0] != n:
            raise ShapeError(f"modality {i} has {f.shape[0]} rows, expected {n}")
        if f.shape[1] != model.branches[i].in_dim:
            raise ShapeError(
                f"modality {i} width {f.shape[1]} != branch input "
                f"{model.branches[i].in_dim}"
            )
        if g.num_nodes != n:
            raise ShapeError(f"graph {i} has {g.num_nodes} nodes, expected {n}")
        if not np.array_equal(g.connected, mask[:, i]):
            raise ValidationError(
                f"graph {i} connectivity disagrees with the availability mask"
            )
    return feats, mask


def fused_forward(model: FusionModel, features: list, graphs: list[Graph],
                  mask) -> tuple[Matrix, FusionCache]:
    """Fused logits over all nodes plus the caches for the backward pass."""
    feats, mask = _validate_fusion_inputs(model, features, graphs, mask)
    logits_list, caches = [], []
    for branch, f, g in zip(model.branches, feats, graphs):
        logits, cache = branch_forward(branch, f, g)
        logits_list.append(logits)
        caches.append(cache)
    fused = combine_logits(logits_list, mask)
    counts = mask.sum(axis=1).astype(np.float64)
    return fused, FusionCache(caches=caches, mask=mask, counts=counts)


def fused_backward(model: FusionModel, cache: FusionCache,
                   grad_fused: Matrix) -> dict[str, np.ndarray]:
    """Parameter gradients for every branch given the fused-logit gradient."""
    grads: dict[str, np.ndarray] = {}
    scale = 1.0 / cache.counts
    for m, (branch, bcache) in enumerate(zip(model.branches, cache.caches)):
        g_branch = grad_fused * (cache.mask[:, m] * scale)[:, None]
        grads.update(branch_backward(branch, bcache, g_branch, prefix=f"branch{m}."))
    return grads


def masked_loss(fused: Matrix, labels, subset) -> tuple[float, Matrix]:
    """Classification loss restricted to `subset` rows, with full-size grad.

    Softmax cross entropy for two or more logit columns; sigmoid binary
    cross entropy when the model emits a single logit. The returned
    gradient has zero rows outside the subset.
    """
    fused = as_matrix(fused)
    subset = np.asarray(subset)
    if subset.ndim != 1 or subset.size == 0:
        raise ValidationError("subset must be a non-empty 1-D index array")
    if np.unique(subset).size != subset.size:
        raise ValidationError("subset contains duplicate node ids")
    if subset.min() < 0 or subset.max() >= fused.shape[0]:
        raise ValidationError("subset node ids out of range")
    labels = np.asarray(labels)
    if labels.shape[0] != fused.shape[0]:
        raise ShapeError(
            f"labels length {labels.shape[0]} != node count {fused.shape[0]}"
        )
    sub_logits = np.ascontiguousarray(fused[subset])
    sub_labels = labels[subset]
    if fused.shape[1] == 1:
        loss, g = sigmoid_bce_with_logits(sub_logits, sub_labels)
    else:
        loss, g = softmax_cross_entropy_with_logits(sub_logits, sub_labels)
    grad = np.zeros_like(fused)
    grad[subset] = g
    return loss, grad


def fusion_loss_and_grads(model: FusionModel, features, graphs, mask, labels,
                          subset) -> tuple[float, dict[str, np.ndarray], Matrix]:
    """One full forward/backward pass; returns loss, gradients, fused logits."""
    fused, cache = fused_forward(model, features, graphs, mask)
    loss, grad_fused = masked_loss(fused, labels, subset)
    grads = fused_backward(model, cache, grad_fused)
    return loss, grads, fused


def make_gatimp_model(in_dim: int, num_classes: int, heads: int,
                      hidden_fraction: float, rng: np.random.Generator,
                      leaky_slope: float = 0.2) -> FusionModel:
    """Imputation baseline: one two-layer branch over stacked features."""
    return init_fusion_model("gat2", [in_dim], num_classes, heads,
                             hidden_fraction, rng, leaky_slope)


def gatimp_forward(model: FusionModel, stacked, graph: Graph) -> tuple[Matrix, FusionCache]:
    """Forward the one-branch baseline; every node counts as available."""
    if model.num_modalities != 1:
        raise ValidationError("the imputation baseline uses exactly one branch")
    stacked = as_matrix(stacked)
    mask = np.ones((stacked.shape[0], 1), dtype=bool)
    return fused_forward(model, [stacked], [graph], mask)


@dataclass
class LogisticModel:
    """Multinomial logistic regression: logits = x @ W.T + b."""

    W: Matrix
    b: np.ndarray


def train_logistic(x, y, num_classes: int, epochs: int = 200,
                   lr: float = 1e-3) -> tuple[LogisticModel, list[float]]:
    """Zero-initialized logistic regression trained with the Adam loop."""
    x = as_matrix(x)
    if num_classes < 2:
        raise ValidationError("logistic baseline needs at least two classes")
    model = LogisticModel(W=np.zeros((num_classes, x.shape[1])), b=np.zeros(num_classes))
    params = {"W": model.W, "b": model.b}
    state = AdamState()
    trace = []
    for _ in range(epochs):
        logits = x @ model.W.T + model.b
        loss, g = softmax_cross_entropy_with_logits(logits, y)
        trace.append(loss)
        adam_step(params, {"W": g.T @ x, "b": g.sum(axis=0)}, state, lr)
    return model, trace


def logistic_predict(model: LogisticModel, x) -> Matrix:
    return as_matrix(x) @ model.W.T + model.b


def logistic_baseline(x_train, y_train, x_test, y_test, num_classes: int,
                      epochs: int = 200, lr: float = 1e-3) -> tuple[float, float]:
    """Train on the train rows, report (accuracy, auc) on the test rows."""
    from .evaluation import accuracy, auc_from_logits

    model, _ = train_logistic(x_train, y_train, num_classes, epochs, lr)
    logits = logistic_predict(model, x_test)
    preds = np.argmax(logits, axis=1)
    return accuracy(preds, y_test), auc_from_logits(logits, y_test)


def _branch_meta(branch: Branch) -> dict:
    return {
        "variant": branch.variant,
        "heads": len(branch.layer1.heads),
        "leaky_slope": branch.layer1.leaky_slope,
    }


def save_model(path, model: FusionModel, extra: dict | None = None) -> None:
    """Checkpoint a fusion model (architecture metadata + parameter arrays)."""
    meta = {
        "kind": "fusion_model",
        "num_classes": model.num_classes,
        "branches": [_branch_meta(b) for b in model.branches],
        "extra": extra or {},
    }
    save_params(path, model_params(model), meta)


def _rebuild_layer(keys: dict[str, np.ndarray], prefix: str, heads: int,
                   combine: str, activation: str, slope: float) -> GatLayer:
    hs = []
    for k in range(heads):
        try:
            w = keys[f"{prefix}.head{k}.W"]
            a = keys[f"{prefix}.head{k}.a"]
        except KeyError as exc:
            raise FormatError(f"checkpoint is missing parameter {exc.args[0]!r}") from None
        hs.append(GatHead(W=w, a=a))
    return GatLayer(heads=hs, combine=combine, activation=activation,
                    leaky_slope=slope)


def load_model(path) -> tuple[FusionModel, dict]:
    """Rebuild a fusion model from :func:`save_model` output, value-exact."""
    params, meta = load_params(path)
    if meta.get("kind") != "fusion_model":
        raise FormatError(f"{path}: checkpoint does not hold a fusion model")
    try:
        num_classes = int(meta["num_classes"])
        branch_metas = meta["branches"]
    except KeyError as exc:
        raise FormatError(f"{path}: checkpoint metadata missing {exc.args[0]!r}") from None
    branches = []
    used = set()
    for m, bm in enumerate(branch_metas):
        prefix = f"branch{m}."
        block = {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}
        heads = int(bm["heads"])
        expected = {f"layer1.head{k}.{p}" for k in range(heads) for p in ("W", "a")}
        if bm.get("variant") == "gat2":
            expected |= {"layer2.head0.W", "layer2.head0.a"}
        else:
            expected |= {"mlp.W1", "mlp.b1", "mlp.W2", "mlp.b2"}
        used.update(prefix + k for k in block.keys() & expected)
        slope = float(bm["leaky_slope"])
        layer1 = _rebuild_layer(block, "layer1", heads, "concat", "elu", slope)
        if bm["variant"] == "gat2":
            layer2 = _rebuild_layer(block, "layer2", 1, "mean", "identity", slope)
            branch = Branch(variant="gat2", layer1=layer1, layer2=layer2)
        elif bm["variant"] == "gat1":
            try:
                mlp = MlpParams(W1=block["mlp.W1"], b1=block["mlp.b1"],
                                W2=block["mlp.W2"], b2=block["mlp.b2"])
            except KeyError as exc:
                raise FormatError(
                    f"checkpoint is missing parameter {exc.args[0]!r}"
                ) from None
            branch = Branch(variant="gat1", layer1=layer1, mlp=mlp)
        else:
            raise FormatError(f"unknown branch variant {bm['variant']!r}")
        if branch.out_dim != num_classes:
            raise FormatError(
                f"branch {m} emits {branch.out_dim} classes, metadata says "
                f"{num_classes}"
            )
        branches.append(branch)
    stray = set(params) - used
    if stray:
        raise FormatError(f"checkpoint holds unexpected parameters: {sorted(stray)}")
    model = FusionModel(branches=branches, num_classes=num_classes)
    return model, meta.get("extra", {})
