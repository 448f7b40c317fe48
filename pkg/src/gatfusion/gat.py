"""Graph attention layers and per-modality branches, gradients included.

A head projects node features with W, scores every edge by a LeakyReLU of
``a . [W h_dst || W h_src]``, normalizes the scores per destination node
with a segment softmax, and aggregates the projected sources. Nodes with
no in-edges (missing modality) produce exact zero rows. A layer runs K
heads and combines them by concatenation (hidden layers) or averaging
(output layers); the elementwise activation is applied by the layer.

Branches classify one modality: ``gat2`` stacks two attention layers,
``gat1`` follows one attention layer with a dense two-layer MLP. Both
zero the logit rows of disconnected nodes, so a missing modality can
never leak through its branch.

Every backward rule here is hand-derived; ``numerics.finite_difference_check``
verifies them in the test suite.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, ShapeError, ValidationError
from .graphs import Graph
from .numerics import (
    Matrix,
    as_matrix,
    elu,
    elu_backward,
    glorot_init,
    segment_softmax,
    segment_softmax_backward,
    segment_sum,
)

CHECKPOINT_FORMAT_VERSION = 1

_COMBINES = ("mean", "concat")
_ACTIVATIONS = ("elu", "identity")
_VARIANTS = ("gat2", "gat1")


@dataclass
class GatHead:
    """One attention head: projection W (out, in) and scorer a (2*out,)."""

    W: Matrix
    a: np.ndarray


@dataclass
class GatLayer:
    heads: list[GatHead]
    combine: str
    activation: str
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.combine not in _COMBINES:
            raise ConfigError(f"combine must be one of {_COMBINES}, got {self.combine!r}")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(
                f"activation must be one of {_ACTIVATIONS}, got {self.activation!r}"
            )
        if not self.heads:
            raise ConfigError("a layer needs at least one head")

    @property
    def in_dim(self) -> int:
        return self.heads[0].W.shape[1]

    @property
    def head_dim(self) -> int:
        return self.heads[0].W.shape[0]

    @property
    def out_dim(self) -> int:
        if self.combine == "concat":
            return self.head_dim * len(self.heads)
        return self.head_dim


@dataclass
class AttentionRecord:
    """Attention coefficients of one head, aligned with the graph's edges."""

    head_index: int
    alpha: np.ndarray


def init_gat_layer(in_dim: int, head_dim: int, num_heads: int, combine: str,
                   activation: str, rng: np.random.Generator,
                   leaky_slope: float = 0.2) -> GatLayer:
    """Glorot-initialized layer; per head, W is drawn before a."""
    heads = []
    for _ in range(num_heads):
        W = glorot_init(head_dim, in_dim, rng)
        a = glorot_init(2 * head_dim, 1, rng)[:, 0]
        heads.append(GatHead(W=W, a=a))
    return GatLayer(heads=heads, combine=combine, activation=activation,
                    leaky_slope=leaky_slope)


def _edge_forward(z: Matrix, graph: Graph, a: np.ndarray, slope: float):
    """Attention scores, softmax, and aggregation for one head."""
    f = z.shape[1]
    s_dst = z @ a[:f]
    s_src = z @ a[f:]
    scores = s_dst[graph.dst] + s_src[graph.src]
    pos = scores > 0.0
    e = np.where(pos, scores, slope * scores)
    alpha = segment_softmax(e, graph.nonempty_indptr)
    out = segment_sum(alpha[:, None] * z[graph.src], graph.indptr)
    return out, alpha, pos


def _scatter_to_src(values: np.ndarray, graph: Graph) -> np.ndarray:
    """Sum edge values into their source nodes."""
    return segment_sum(values[graph.src_order], graph.src_indptr)


def _edge_backward(z: Matrix, graph: Graph, a: np.ndarray, slope: float,
                   alpha: np.ndarray, pos: np.ndarray, grad_out: Matrix):
    """Gradients of one head's aggregation w.r.t. z and a."""
    f = z.shape[1]
    g_alpha = np.einsum("ef,ef->e", grad_out[graph.dst], z[graph.src])
    dot = segment_sum(alpha * g_alpha, graph.indptr)
    g_e = alpha * (g_alpha - dot[graph.dst])
    g_scores = np.where(pos, g_e, slope * g_e)
    t = segment_sum(g_scores, graph.indptr)       # d loss / d s_dst per node
    u = _scatter_to_src(g_scores, graph)          # d loss / d s_src per node
    g_z = _scatter_to_src(alpha[:, None] * grad_out[graph.dst], graph)
    g_z += t[:, None] * a[:f]
    g_z += u[:, None] * a[f:]
    g_a = np.concatenate([z.T @ t, z.T @ u])
    return g_z, g_a


def head_forward(head: GatHead, h, graph: Graph, leaky_slope: float = 0.2,
                 head_index: int = 0) -> tuple[Matrix, AttentionRecord]:
    """Raw output of a single head (no activation) plus its attention."""
    h = as_matrix(h)
    _check_layer_input(h, graph, head.W.shape[1])
    z = h @ head.W.T
    out, alpha, _ = _edge_forward(z, graph, head.a, leaky_slope)
    return out, AttentionRecord(head_index=head_index, alpha=alpha)


def _check_layer_input(h: Matrix, graph: Graph, in_dim: int) -> None:
    if h.shape[0] != graph.num_nodes:
        raise ShapeError(
            f"feature rows ({h.shape[0]}) != graph nodes ({graph.num_nodes})"
        )
    if h.shape[1] != in_dim:
        raise ShapeError(f"feature width {h.shape[1]} != layer input width {in_dim}")


@dataclass
class LayerCache:
    h: Matrix
    graph: Graph
    w_all: Matrix
    z_all: Matrix
    alphas: list[np.ndarray]
    poss: list[np.ndarray]
    pre: Matrix  # combined value before the layer activation

    def attention(self) -> list[AttentionRecord]:
        return [AttentionRecord(k, a) for k, a in enumerate(self.alphas)]


def layer_forward(layer: GatLayer, h, graph: Graph) -> tuple[Matrix, LayerCache]:
    """All heads, combination, and activation; returns output and cache."""
    h = as_matrix(h)
    _check_layer_input(h, graph, layer.in_dim)
    k = len(layer.heads)
    f = layer.head_dim
    w_all = np.concatenate([hd.W for hd in layer.heads], axis=0)
    z_all = h @ w_all.T
    alphas, poss, outs = [], [], []
    for i, hd in enumerate(layer.heads):
        z = z_all[:, i * f:(i + 1) * f]
        out, alpha, pos = _edge_forward(z, graph, hd.a, layer.leaky_slope)
        outs.append(out)
        alphas.append(alpha)
        poss.append(pos)
    if layer.combine == "mean":
        pre = outs[0] if k == 1 else sum(outs) / k
    else:
        pre = np.concatenate(outs, axis=1)
    out = elu(pre) if layer.activation == "elu" else pre
    return out, LayerCache(h=h, graph=graph, w_all=w_all, z_all=z_all,
                           alphas=alphas, poss=poss, pre=pre)


def layer_backward(layer: GatLayer, cache: LayerCache,
                   grad_out: Matrix) -> tuple[list[Matrix], list[np.ndarray], Matrix]:
    """Per-head W and a gradients plus the gradient w.r.t. the input."""
    if grad_out.shape != (cache.h.shape[0], layer.out_dim):
        raise ShapeError(
            f"grad shape {grad_out.shape} != layer output shape "
            f"{(cache.h.shape[0], layer.out_dim)}"
        )
    k = len(layer.heads)
    f = layer.head_dim
    g_pre = elu_backward(grad_out, cache.pre) if layer.activation == "elu" else grad_out
    g_z_all = np.empty_like(cache.z_all)
    grad_a = []
    for i, hd in enumerate(layer.heads):
        if layer.combine == "mean":
            g_head = g_pre if k == 1 else g_pre / k
        else:
            g_head = g_pre[:, i * f:(i + 1) * f]
        z = cache.z_all[:, i * f:(i + 1) * f]
        g_z, g_a = _edge_backward(z, cache.graph, hd.a, layer.leaky_slope,
                                  cache.alphas[i], cache.poss[i], g_head)
        g_z_all[:, i * f:(i + 1) * f] = g_z
        grad_a.append(g_a)
    g_w_all = g_z_all.T @ cache.h
    grad_w = [np.ascontiguousarray(g_w_all[i * f:(i + 1) * f]) for i in range(k)]
    grad_h = g_z_all @ cache.w_all
    return grad_w, grad_a, grad_h


@dataclass
class MlpParams:
    """Two dense layers; hidden width is half the input width (min 1)."""

    W1: Matrix
    b1: np.ndarray
    W2: Matrix
    b2: np.ndarray


@dataclass
class Branch:
    """Per-modality classifier: two GAT layers, or one GAT layer + MLP."""

    variant: str
    layer1: GatLayer
    layer2: GatLayer | None = None
    mlp: MlpParams | None = None

    def __post_init__(self):
        if self.variant not in _VARIANTS:
            raise ConfigError(f"variant must be one of {_VARIANTS}, got {self.variant!r}")
        if self.variant == "gat2" and (self.layer2 is None or self.mlp is not None):
            raise ConfigError("gat2 branches need layer2 and no mlp")
        if self.variant == "gat1" and (self.mlp is None or self.layer2 is not None):
            raise ConfigError("gat1 branches need an mlp and no layer2")

    @property
    def in_dim(self) -> int:
        return self.layer1.in_dim

    @property
    def out_dim(self) -> int:
        if self.variant == "gat2":
            return self.layer2.out_dim
        return self.mlp.W2.shape[0]


def hidden_width(in_dim: int, hidden_fraction: float) -> int:
    """Per-head hidden width: ceil(fraction * input width), at least 1."""
    if not 0.0 < hidden_fraction <= 1.0:
        raise ConfigError(f"hidden_fraction must lie in (0, 1], got {hidden_fraction}")
    return max(1, math.ceil(hidden_fraction * in_dim))


def init_branch(variant: str, in_dim: int, num_classes: int, heads: int,
                hidden_fraction: float, rng: np.random.Generator,
                leaky_slope: float = 0.2) -> Branch:
    """Build a branch; layer 1 uses `heads` concatenated heads with ELU."""
    if variant not in _VARIANTS:
        raise ConfigError(f"variant must be one of {_VARIANTS}, got {variant!r}")
    if num_classes < 1:
        raise ConfigError(f"num_classes must be at least 1, got {num_classes}")
    if heads < 1:
        raise ConfigError(f"heads must be at least 1, got {heads}")
    hid = hidden_width(in_dim, hidden_fraction)
    layer1 = init_gat_layer(in_dim, hid, heads, "concat", "elu", rng, leaky_slope)
    width = heads * hid
    if variant == "gat2":
        layer2 = init_gat_layer(width, num_classes, 1, "mean", "identity", rng,
                                leaky_slope)
        return Branch(variant="gat2", layer1=layer1, layer2=layer2)
    mlp_hidden = max(1, math.ceil(0.5 * width))
    mlp = MlpParams(
        W1=glorot_init(mlp_hidden, width, rng),
        b1=np.zeros(mlp_hidden),
        W2=glorot_init(num_classes, mlp_hidden, rng),
        b2=np.zeros(num_classes),
    )
    return Branch(variant="gat1", layer1=layer1, mlp=mlp)


@dataclass
class BranchCache:
    cache1: LayerCache
    connected: np.ndarray
    cache2: LayerCache | None = None
    l1_out: Matrix | None = None
    mlp_pre: Matrix | None = None
    mlp_hidden: Matrix | None = None


def branch_forward(branch: Branch, h, graph: Graph) -> tuple[Matrix, BranchCache]:
    """Per-node logits; rows of graph-disconnected nodes are exactly zero."""
    l1_out, cache1 = layer_forward(branch.layer1, h, graph)
    connected = graph.connected
    if branch.variant == "gat2":
        logits, cache2 = layer_forward(branch.layer2, l1_out, graph)
        logits[~connected] = 0.0
        return logits, BranchCache(cache1=cache1, connected=connected, cache2=cache2)
    mlp = branch.mlp
    pre = l1_out @ mlp.W1.T + mlp.b1
    hidden = elu(pre)
    logits = hidden @ mlp.W2.T + mlp.b2
    logits[~connected] = 0.0
    return logits, BranchCache(cache1=cache1, connected=connected, l1_out=l1_out,
                               mlp_pre=pre, mlp_hidden=hidden)


def branch_backward(branch: Branch, cache: BranchCache, grad_logits: Matrix,
                    prefix: str = "") -> dict[str, np.ndarray]:
    """Gradients for every branch parameter, keyed like `branch_params`."""
    g = grad_logits
    if not cache.connected.all():
        g = grad_logits.copy()
        g[~cache.connected] = 0.0
    grads: dict[str, np.ndarray] = {}
    if branch.variant == "gat2":
        gw2, ga2, g_l1 = layer_backward(branch.layer2, cache.cache2, g)
        grads[f"{prefix}layer2.head0.W"] = gw2[0]
        grads[f"{prefix}layer2.head0.a"] = ga2[0]
    else:
        mlp = branch.mlp
        grads[f"{prefix}mlp.W2"] = g.T @ cache.mlp_hidden
        grads[f"{prefix}mlp.b2"] = g.sum(axis=0)
        g_hidden = g @ mlp.W2
        g_pre = elu_backward(g_hidden, cache.mlp_pre)
        grads[f"{prefix}mlp.W1"] = g_pre.T @ cache.l1_out
        grads[f"{prefix}mlp.b1"] = g_pre.sum(axis=0)
        g_l1 = g_pre @ mlp.W1
    gw1, ga1, _ = layer_backward(branch.layer1, cache.cache1, g_l1)
    for k in range(len(branch.layer1.heads)):
        grads[f"{prefix}layer1.head{k}.W"] = gw1[k]
        grads[f"{prefix}layer1.head{k}.a"] = ga1[k]
    return grads


def layer_params(layer: GatLayer, prefix: str) -> dict[str, np.ndarray]:
    """Live references to the layer's parameter arrays."""
    out: dict[str, np.ndarray] = {}
    for k, hd in enumerate(layer.heads):
        out[f"{prefix}.head{k}.W"] = hd.W
        out[f"{prefix}.head{k}.a"] = hd.a
    return out


def branch_params(branch: Branch, prefix: str = "") -> dict[str, np.ndarray]:
    """Live references to every parameter of a branch."""
    out = layer_params(branch.layer1, f"{prefix}layer1")
    if branch.variant == "gat2":
        out.update(layer_params(branch.layer2, f"{prefix}layer2"))
    else:
        mlp = branch.mlp
        out[f"{prefix}mlp.W1"] = mlp.W1
        out[f"{prefix}mlp.b1"] = mlp.b1
        out[f"{prefix}mlp.W2"] = mlp.W2
        out[f"{prefix}mlp.b2"] = mlp.b2
    return out


def save_params(path, params: dict[str, np.ndarray], meta: dict) -> None:
    """Write a versioned .npz checkpoint; float64 arrays round-trip exactly."""
    if "__meta__" in params:
        raise ValidationError("'__meta__' is a reserved checkpoint key")
    header = {"format_version": CHECKPOINT_FORMAT_VERSION, **meta}
    payload: dict[str, np.ndarray] = {"__meta__": np.array(json.dumps(header))}
    payload.update(params)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_params(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint written by :func:`save_params`."""
    try:
        archive = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: not a readable checkpoint ({exc})") from None
    with archive:
        if "__meta__" not in archive.files:
            raise FormatError(f"{path}: checkpoint is missing its metadata entry")
        try:
            meta = json.loads(str(archive["__meta__"]))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: corrupt checkpoint metadata ({exc})") from None
        version = meta.pop("format_version", None)
        if version != CHECKPOINT_FORMAT_VERSION:
            raise FormatError(
                f"{path}: unsupported checkpoint format version {version!r}"
            )
        params = {k: archive[k] for k in archive.files if k != "__meta__"}
    return params, meta
