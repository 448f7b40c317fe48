"""Neighborhood graphs over dataset nodes, stored as in-edge CSR.

A :class:`Graph` keeps, for every destination node, the sorted array of
source nodes whose messages it aggregates (its in-neighborhood). All
builders add a self-loop for every *available* node and leave unavailable
nodes completely disconnected (no self-loop), which is how missing
modalities are isolated downstream.

Distance ties in the k-nearest-neighbor rule break toward the lower node
index, and the directed selections are symmetrized by union, so the
training graphs are undirected. Inductive attachment adds test-to-train
edges only (plus test self-loops); the training rows of the CSR are
carried over byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ShapeError, ValidationError
from .numerics import as_matrix

_KNN_CHUNK = 512  # query rows per distance block; bounds peak memory


@dataclass(frozen=True, eq=False)
class Graph:
    """Directed graph in in-edge CSR form.

    ``src[indptr[i]:indptr[i+1]]`` lists the in-neighbors of node i in
    strictly increasing order. ``weights`` aligns with ``src``; builders
    that have no weighting rule store ones. Attention never consumes the
    weights; they are recorded for export and inspection.
    """

    num_nodes: int
    indptr: np.ndarray
    src: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        n = self.num_nodes
        if n < 1:
            raise ValidationError(f"graph needs at least one node, got {n}")
        indptr = np.asarray(self.indptr, dtype=np.int64)
        src = np.asarray(self.src, dtype=np.int64)
        weights = np.asarray(self.weights, dtype=np.int64)
        if indptr.shape != (n + 1,):
            raise ShapeError(f"indptr must have shape ({n + 1},), got {indptr.shape}")
        if indptr[0] != 0 or indptr[-1] != src.size:
            raise ValidationError("indptr must span [0, num_edges]")
        if np.any(np.diff(indptr) < 0):
            raise ValidationError("indptr must be non-decreasing")
        if src.ndim != 1 or weights.shape != src.shape:
            raise ShapeError("src and weights must be 1-D arrays of equal length")
        if src.size and (src.min() < 0 or src.max() >= n):
            raise ValidationError("src node ids out of range")
        if np.any(weights < 1):
            raise ValidationError("edge weights must be positive integers")
        if src.size > 1:
            inc = np.diff(src) > 0
            boundary = np.zeros(src.size - 1, dtype=bool)
            boundary[indptr[1:-1][(indptr[1:-1] > 0) & (indptr[1:-1] < src.size)] - 1] = True
            if not np.all(inc | boundary):
                raise ValidationError("in-neighbor lists must be strictly increasing")
        object.__setattr__(self, "indptr", indptr)
        object.__setattr__(self, "src", src)
        object.__setattr__(self, "weights", weights)

    @property
    def num_edges(self) -> int:
        return int(self.src.size)

    @cached_property
    def degrees(self) -> np.ndarray:
        """In-degree per node (self-loops count)."""
        return np.diff(self.indptr)

    @cached_property
    def dst(self) -> np.ndarray:
        """Destination node of every edge, aligned with ``src``."""
        return np.repeat(np.arange(self.num_nodes, dtype=np.int64), self.degrees)

    @cached_property
    def src_order(self) -> np.ndarray:
        """Edge permutation that groups edges by source node."""
        return np.argsort(self.src, kind="stable")

    @cached_property
    def src_indptr(self) -> np.ndarray:
        """Segment boundaries of ``src_order`` groups (out-edge CSR)."""
        counts = np.bincount(self.src, minlength=self.num_nodes)
        return np.concatenate(([0], np.cumsum(counts))).astype(np.int64)

    @cached_property
    def connected(self) -> np.ndarray:
        """Boolean mask of nodes with at least one in-edge."""
        return self.degrees > 0

    @cached_property
    def nonempty_indptr(self) -> np.ndarray:
        """Indptr over connected nodes only; valid softmax segments."""
        starts = self.indptr[:-1][self.connected]
        return np.append(starts, self.num_edges).astype(np.int64)

    def in_neighbors(self, i: int) -> np.ndarray:
        return self.src[self.indptr[i]:self.indptr[i + 1]]

    def equals(self, other: "Graph") -> bool:
        return (
            self.num_nodes == other.num_nodes
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.src, other.src)
            and np.array_equal(self.weights, other.weights)
        )


def _check_available(available, n: int) -> np.ndarray:
    if available is None:
        return np.ones(n, dtype=bool)
    avail = np.asarray(available)
    if avail.shape != (n,):
        raise ShapeError(f"availability must have shape ({n},), got {avail.shape}")
    return avail.astype(bool)


def _csr_from_pairs(num_nodes: int, dst: np.ndarray, src: np.ndarray,
                    weights: np.ndarray | None = None) -> Graph:
    """Build a Graph from (possibly duplicated) edge pairs."""
    keys = dst.astype(np.int64) * num_nodes + src.astype(np.int64)
    if weights is None:
        keys = np.unique(keys)
        w = np.ones(keys.size, dtype=np.int64)
    else:
        keys, idx = np.unique(keys, return_index=True)
        w = np.asarray(weights, dtype=np.int64)[idx]
    dst_u = keys // num_nodes
    src_u = keys % num_nodes
    counts = np.bincount(dst_u, minlength=num_nodes)
    indptr = np.concatenate(([0], np.cumsum(counts)))
    return Graph(num_nodes=num_nodes, indptr=indptr, src=src_u, weights=w)


def _nearest_positions(query: np.ndarray, cands: np.ndarray, k: int,
                       self_offset: int | None) -> np.ndarray:
    """Positions (into `cands`) of the k nearest candidates per query row.

    Ties on squared distance resolve toward the lower candidate position.
    With `self_offset` set, query row q is candidate q + self_offset and
    is excluded from its own result.
    """
    nq = query.shape[0]
    nc = cands.shape[0]
    out = np.empty((nq, k), dtype=np.int64)
    c_norms = np.einsum("ij,ij->i", cands, cands)
    for lo in range(0, nq, _KNN_CHUNK):
        hi = min(lo + _KNN_CHUNK, nq)
        block = query[lo:hi]
        d2 = c_norms[None, :] - 2.0 * (block @ cands.T)
        # query norms omitted: constant per row, order-preserving
        if self_offset is not None:
            d2[np.arange(hi - lo), np.arange(lo, hi) + self_offset] = np.inf
        part = np.argpartition(d2, k - 1, axis=1)[:, :k]
        kth = np.take_along_axis(d2, part, axis=1).max(axis=1)
        for r in range(hi - lo):
            row = d2[r]
            lt = np.flatnonzero(row < kth[r])
            need = k - lt.size
            if need:
                eq = np.flatnonzero(row == kth[r])[:need]
                out[lo + r, :lt.size] = lt
                out[lo + r, lt.size:] = eq
            else:
                out[lo + r] = lt[:k]
    return out


def knn_graph(features, k: int, available=None) -> Graph:
    """Union-symmetrized k-nearest-neighbor graph over available nodes.

    Each available node selects its k nearest available nodes (Euclidean
    distance, self excluded, ties to the lower index); an edge appears in
    both directions if either endpoint selected the other. Every available
    node gets a self-loop. Unavailable nodes have no edges at all and
    their feature rows are never read.
    """
    feats = as_matrix(features)
    n = feats.shape[0]
    avail = _check_available(available, n)
    avail_idx = np.flatnonzero(avail)
    if k < 1:
        raise ConfigError(f"k must be at least 1, got {k}")
    if k >= avail_idx.size:
        raise ConfigError(
            f"k={k} needs at least k+1 available nodes, got {avail_idx.size}"
        )
    sub = np.ascontiguousarray(feats[avail_idx])
    sel = _nearest_positions(sub, sub, k, self_offset=0)
    pick_dst = np.repeat(avail_idx, k)
    pick_src = avail_idx[sel.ravel()]
    dst = np.concatenate([pick_dst, pick_src, avail_idx])
    src = np.concatenate([pick_src, pick_dst, avail_idx])
    return _csr_from_pairs(n, dst, src)


@dataclass(frozen=True)
class MetaInfo:
    """Per-node clinical covariates driving the meta-information rule."""

    apoe4: np.ndarray
    gender: np.ndarray
    age: np.ndarray

    def __post_init__(self):
        apoe4 = np.asarray(self.apoe4)
        gender = np.asarray(self.gender)
        age = np.asarray(self.age, dtype=np.float64)
        if not (apoe4.ndim == gender.ndim == age.ndim == 1):
            raise ShapeError("meta arrays must be 1-D")
        if not (apoe4.size == gender.size == age.size):
            raise ShapeError("meta arrays must have equal length")
        object.__setattr__(self, "apoe4", apoe4)
        object.__setattr__(self, "gender", gender)
        object.__setattr__(self, "age", age)

    def __len__(self) -> int:
        return self.apoe4.size


def mi_graph(meta: MetaInfo, available=None) -> Graph:
    """Meta-information graph: connect nodes sharing the APOE4 allele count.

    Edge weight is 1, plus 1 if the genders match, plus 1 if the ages lie
    within two years. Self-loops carry the reflexive weight 3. Weights are
    recorded on the graph but not consumed by attention.
    """
    n = len(meta)
    avail = _check_available(available, n)
    avail_idx = np.flatnonzero(avail)
    if avail_idx.size == 0:
        raise ConfigError("meta-information graph needs at least one available node")
    apoe4 = meta.apoe4[avail_idx]
    if not np.all(np.isin(apoe4, (0, 1, 2))):
        raise ValidationError("apoe4 allele counts must be 0, 1, or 2 for available nodes")
    age = meta.age[avail_idx]
    if not np.all(np.isfinite(age)):
        raise ValidationError("ages must be finite for available nodes")
    gender = meta.gender[avail_idx]

    dst_parts = [avail_idx]
    src_parts = [avail_idx]
    w_parts = [np.full(avail_idx.size, 3, dtype=np.int64)]
    for value in np.unique(apoe4):
        members = avail_idx[apoe4 == value]
        gm = gender[apoe4 == value]
        am = age[apoe4 == value]
        m = members.size
        if m < 2:
            continue
        ii = np.repeat(np.arange(m), m)
        jj = np.tile(np.arange(m), m)
        off = ii != jj
        ii, jj = ii[off], jj[off]
        w = (
            1
            + (gm[ii] == gm[jj]).astype(np.int64)
            + (np.abs(am[ii] - am[jj]) <= 2.0).astype(np.int64)
        )
        dst_parts.append(members[ii])
        src_parts.append(members[jj])
        w_parts.append(w)
    return _csr_from_pairs(
        n,
        np.concatenate(dst_parts),
        np.concatenate(src_parts),
        np.concatenate(w_parts),
    )


def fc_graph(num_nodes: int, available=None) -> Graph:
    """Fully-connected graph over the available nodes (self-loops included)."""
    if num_nodes < 1:
        raise ValidationError(f"graph needs at least one node, got {num_nodes}")
    avail = _check_available(available, num_nodes)
    avail_idx = np.flatnonzero(avail)
    m = avail_idx.size
    dst = np.repeat(avail_idx, m)
    src = np.tile(avail_idx, m)
    return _csr_from_pairs(num_nodes, dst, src)


def attach_test_nodes(train_graph: Graph, train_features, test_features, k: int,
                      train_available=None, test_available=None) -> Graph:
    """Extend a training graph with inductively attached test nodes.

    Test nodes occupy ids ``[n_train, n_train + n_test)``. Each available
    test node gains directed edges from its k nearest available training
    nodes plus a self-loop; unavailable test nodes stay disconnected. No
    test-to-test edges are created, no training row changes, and training
    features influence nothing beyond neighbor selection.
    """
    train_feats = as_matrix(train_features)
    test_feats = as_matrix(test_features)
    n_train = train_graph.num_nodes
    if train_feats.shape[0] != n_train:
        raise ShapeError(
            f"train features have {train_feats.shape[0]} rows for a "
            f"{n_train}-node graph"
        )
    if test_feats.shape[1] != train_feats.shape[1]:
        raise ShapeError(
            f"feature widths differ: train {train_feats.shape[1]}, "
            f"test {test_feats.shape[1]}"
        )
    n_test = test_feats.shape[0]
    train_avail = _check_available(train_available, n_train)
    test_avail = _check_available(test_available, n_test)
    if not np.array_equal(train_graph.degrees > 0, train_avail):
        raise ValidationError("train graph connectivity disagrees with train availability")
    avail_idx = np.flatnonzero(train_avail)
    if k < 1:
        raise ConfigError(f"k must be at least 1, got {k}")
    if avail_idx.size == 0:
        raise ConfigError("cannot attach test nodes: no available training nodes")
    if k > avail_idx.size:
        raise ConfigError(
            f"k={k} exceeds the {avail_idx.size} available training nodes"
        )
    n = n_train + n_test
    test_idx = np.flatnonzero(test_avail)
    new_src = [np.empty(0, dtype=np.int64)]
    new_deg = np.zeros(n_test, dtype=np.int64)
    if test_idx.size:
        sub = np.ascontiguousarray(test_feats[test_idx])
        cands = np.ascontiguousarray(train_feats[avail_idx])
        sel = _nearest_positions(sub, cands, k, self_offset=None)
        neighbors = avail_idx[sel]  # (n_avail_test, k) global train ids
        for row, t in enumerate(test_idx):
            nbrs = np.sort(neighbors[row])
            new_src.append(np.concatenate([nbrs, [n_train + t]]))
            new_deg[t] = k + 1
    indptr = np.concatenate([
        train_graph.indptr,
        train_graph.num_edges + np.cumsum(new_deg),
    ])
    src = np.concatenate([train_graph.src] + new_src)
    weights = np.concatenate([
        train_graph.weights,
        np.ones(int(new_deg.sum()), dtype=np.int64),
    ])
    return Graph(num_nodes=n, indptr=indptr, src=src, weights=weights)


@dataclass(frozen=True)
class GraphStats:
    """Degree histogram, connected-component count, and isolation count."""

    degree_histogram: np.ndarray
    component_count: int
    disconnected_count: int


def graph_stats(g: Graph) -> GraphStats:
    """Summarize a graph; components are computed on the undirected view.

    Nodes with no edges at all are reported as disconnected and belong to
    no component, so a fully unavailable graph has component count 0.
    """
    degrees = g.degrees
    hist = np.bincount(degrees)
    disconnected = int(np.count_nonzero(degrees == 0))
    seen = degrees == 0  # skip isolated nodes during the sweep
    components = 0
    src_sorted = g.dst[g.src_order]
    for start in range(g.num_nodes):
        if seen[start]:
            continue
        components += 1
        stack = [start]
        seen[start] = True
        while stack:
            u = stack.pop()
            for v in g.in_neighbors(u):
                if not seen[v]:
                    seen[v] = True
                    stack.append(int(v))
            lo, hi = g.src_indptr[u], g.src_indptr[u + 1]
            for v in src_sorted[lo:hi]:
                if not seen[v]:
                    seen[v] = True
                    stack.append(int(v))
    return GraphStats(
        degree_histogram=hist,
        component_count=components,
        disconnected_count=disconnected,
    )


def write_edgelist(g: Graph, path) -> None:
    """Write ``nodes <N>`` then one ``src dst weight`` line per edge.

    Lines are sorted by (src, dst) so the output is canonical.
    """
    order = np.lexsort((g.dst, g.src))
    src = g.src[order]
    dst = g.dst[order]
    w = g.weights[order]
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"nodes {g.num_nodes}\n")
        for s, d, ww in zip(src, dst, w):
            fh.write(f"{s} {d} {ww}\n")


def read_edgelist(path) -> Graph:
    """Parse the edge-list format written by :func:`write_edgelist`."""
    text = Path(path).read_text(encoding="ascii")
    lines = text.splitlines()
    if not lines:
        raise FormatError(f"{path}: empty edge-list file")
    head = lines[0].split()
    if len(head) != 2 or head[0] != "nodes":
        raise FormatError(f"{path}:1: expected 'nodes <count>', got {lines[0]!r}")
    try:
        n = int(head[1])
    except ValueError:
        raise FormatError(f"{path}:1: node count {head[1]!r} is not an integer") from None
    if n < 1:
        raise FormatError(f"{path}:1: node count must be positive, got {n}")
    triples = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected 'src dst weight', got {line!r}")
        try:
            s, d, w = int(parts[0]), int(parts[1]), int(parts[2])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-integer field in {line!r}") from None
        if not (0 <= s < n and 0 <= d < n):
            raise FormatError(f"{path}:{lineno}: node id out of range [0, {n})")
        if w < 1:
            raise FormatError(f"{path}:{lineno}: weight must be positive, got {w}")
        triples.append((s, d, w))
    if not triples:
        return Graph(
            num_nodes=n,
            indptr=np.zeros(n + 1, dtype=np.int64),
            src=np.empty(0, dtype=np.int64),
            weights=np.empty(0, dtype=np.int64),
        )
    arr = np.asarray(triples, dtype=np.int64)
    keys = arr[:, 1] * n + arr[:, 0]
    if np.unique(keys).size != keys.size:
        raise FormatError(f"{path}: duplicate edges in edge list")
    order = np.argsort(keys, kind="stable")
    dst = arr[order, 1]
    src = arr[order, 0]
    w = arr[order, 2]
    counts = np.bincount(dst, minlength=n)
    indptr = np.concatenate(([0], np.cumsum(counts)))
    return Graph(num_nodes=n, indptr=indptr, src=src, weights=w)
