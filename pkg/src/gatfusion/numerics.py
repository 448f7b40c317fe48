"""Dense float64 arithmetic with explicit, hand-written gradient rules.

Matrices throughout the package are 2-D float64 numpy arrays; parameter
vectors (biases, attention vectors) are 1-D float64 arrays. Every forward
operation here has a matching ``*_backward`` that implements its
vector-Jacobian product from first principles, and
:func:`finite_difference_check` verifies any such pair against central
differences without relying on the analytic rules.

Randomness comes exclusively from ``numpy.random.Generator`` instances
(PCG64, via :func:`make_rng`), so every draw is reproducible from a seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import GraphStructureError, ShapeError, ValidationError

Matrix = np.ndarray


def make_rng(seed) -> np.random.Generator:
    """Return a PCG64 generator seeded deterministically from `seed`."""
    return np.random.default_rng(seed)


def as_matrix(x) -> Matrix:
    """Coerce `x` to a 2-D C-contiguous float64 array, validating the rank."""
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={a.ndim}")
    return a


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product a @ b with an explicit inner-dimension check."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return a @ b


def matmul_backward(grad_out: Matrix, a: Matrix, b: Matrix) -> tuple[Matrix, Matrix]:
    """Gradients of ``sum(grad_out * (a @ b))`` w.r.t. `a` and `b`."""
    if grad_out.shape != (a.shape[0], b.shape[1]):
        raise ShapeError(
            f"matmul_backward: grad shape {grad_out.shape} does not match "
            f"output shape {(a.shape[0], b.shape[1])}"
        )
    return grad_out @ b.T, a.T @ grad_out


def _check_slope(slope: float) -> None:
    if not 0.0 < slope < 1.0:
        raise ValidationError(f"leaky_relu slope must lie in (0, 1), got {slope}")


def leaky_relu(x: np.ndarray, slope: float = 0.2) -> np.ndarray:
    """Elementwise max(x, slope*x); the negative slope applies at x == 0."""
    _check_slope(slope)
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0.0, x, slope * x)


def leaky_relu_backward(grad_out: np.ndarray, x: np.ndarray, slope: float = 0.2) -> np.ndarray:
    _check_slope(slope)
    x = np.asarray(x, dtype=np.float64)
    return grad_out * np.where(x > 0.0, 1.0, slope)


def elu(x: np.ndarray) -> np.ndarray:
    """Elementwise x if x > 0 else exp(x) - 1."""
    x = np.asarray(x, dtype=np.float64)
    # clamp before expm1 so large positives (taken from the linear arm) never overflow
    return np.where(x > 0.0, x, np.expm1(np.minimum(x, 0.0)))


def elu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return grad_out * np.where(x > 0.0, 1.0, np.exp(np.minimum(x, 0.0)))


def _check_indptr(indptr: np.ndarray, total: int) -> np.ndarray:
    indptr = np.asarray(indptr)
    if indptr.ndim != 1 or indptr.size < 1:
        raise ShapeError("indptr must be a 1-D array with at least one entry")
    if not np.issubdtype(indptr.dtype, np.integer):
        raise ShapeError(f"indptr must be integer-typed, got {indptr.dtype}")
    if indptr[0] != 0 or indptr[-1] != total:
        raise ValidationError(
            f"indptr must start at 0 and end at {total}, got [{indptr[0]}, {indptr[-1]}]"
        )
    if np.any(np.diff(indptr) < 0):
        raise ValidationError("indptr must be non-decreasing")
    return indptr.astype(np.int64, copy=False)


def segment_ids(indptr: np.ndarray) -> np.ndarray:
    """Expand an indptr into a per-element segment-index array."""
    return np.repeat(np.arange(indptr.size - 1, dtype=np.int64), np.diff(indptr))


def segment_sum(values: np.ndarray, indptr: np.ndarray) -> np.ndarray:
    """Sum `values` (axis 0) over contiguous segments; empty segments give 0."""
    values = np.asarray(values, dtype=np.float64)
    total = values.shape[0]
    indptr = _check_indptr(indptr, total)
    n = indptr.size - 1
    out = np.zeros((n,) + values.shape[1:])
    if total == 0 or n == 0:
        return out
    starts = indptr[:-1]
    nonempty = indptr[1:] > starts
    if np.any(nonempty):
        # each non-empty segment ends where the next non-empty one starts
        # (empty segments contribute no boundary), so reduceat over the
        # non-empty starts yields exactly the non-empty sums
        out[nonempty] = np.add.reduceat(values, starts[nonempty], axis=0)
    return out


def segment_softmax(scores: np.ndarray, indptr: np.ndarray) -> np.ndarray:
    """Softmax normalized independently within each contiguous segment.

    `scores` is 1-D with ``indptr[-1]`` entries; segment i spans
    ``scores[indptr[i]:indptr[i+1]]``. Stabilized by subtracting each
    segment's max. Every segment must be non-empty.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1:
        raise ShapeError(f"segment_softmax expects 1-D scores, got ndim={scores.ndim}")
    indptr = _check_indptr(indptr, scores.size)
    widths = np.diff(indptr)
    if np.any(widths == 0):
        idx = int(np.flatnonzero(widths == 0)[0])
        raise GraphStructureError(f"segment_softmax: segment {idx} is empty")
    ids = segment_ids(indptr)
    seg_max = np.maximum.reduceat(scores, indptr[:-1])
    ex = np.exp(scores - seg_max[ids])
    denom = np.add.reduceat(ex, indptr[:-1])
    return ex / denom[ids]


def segment_softmax_backward(
    grad_alpha: np.ndarray, alpha: np.ndarray, indptr: np.ndarray
) -> np.ndarray:
    """VJP of segment_softmax given its output `alpha`."""
    grad_alpha = np.asarray(grad_alpha, dtype=np.float64)
    if grad_alpha.shape != alpha.shape:
        raise ShapeError(
            f"segment_softmax_backward: grad shape {grad_alpha.shape} != alpha shape {alpha.shape}"
        )
    indptr = _check_indptr(indptr, alpha.size)
    ids = segment_ids(indptr)
    dot = segment_sum(alpha * grad_alpha, indptr)
    return alpha * (grad_alpha - dot[ids])


def softmax(logits: Matrix) -> Matrix:
    """Row-wise stable softmax."""
    logits = as_matrix(logits)
    shifted = logits - logits.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=1, keepdims=True)


def _check_labels(labels: np.ndarray, n: int, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels must have shape ({n},), got {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValidationError(f"labels must be integers, got dtype {labels.dtype}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValidationError(
            f"labels must lie in [0, {num_classes}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    return labels.astype(np.int64, copy=False)


def softmax_cross_entropy_with_logits(
    logits: Matrix, labels: np.ndarray
) -> tuple[float, Matrix]:
    """Mean cross-entropy over rows and its gradient w.r.t. the logits.

    Uses the log-sum-exp form, so the loss stays finite for logit
    magnitudes far beyond overflow range. The gradient is
    ``(softmax(logits) - onehot(labels)) / n``.
    """
    logits = as_matrix(logits)
    n, c = logits.shape
    if n == 0:
        raise ValidationError("cross entropy over zero rows is undefined")
    labels = _check_labels(labels, n, c)
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(lse - logits[rows, labels]))
    probs = np.exp(logits - lse[:, None])
    grad = probs
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, grad


def sigmoid_bce_with_logits(logits: Matrix, labels: np.ndarray) -> tuple[float, Matrix]:
    """Mean binary cross-entropy on single-logit rows, with gradient.

    `logits` has shape (n, 1); `labels` holds 0/1 integers. Stable form:
    ``max(z,0) - z*y + log1p(exp(-|z|))``; gradient ``(sigmoid(z) - y)/n``.
    """
    logits = as_matrix(logits)
    n, c = logits.shape
    if c != 1:
        raise ShapeError(f"sigmoid_bce expects a single logit column, got {c}")
    if n == 0:
        raise ValidationError("binary cross entropy over zero rows is undefined")
    labels = _check_labels(labels, n, 2)
    z = logits[:, 0]
    y = labels.astype(np.float64)
    loss = float(np.mean(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))))
    sig = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(z) / (1.0 + np.exp(z)))
    grad = ((sig - y) / n)[:, None]
    return loss, grad


def glorot_init(rows: int, cols: int, rng: np.random.Generator) -> Matrix:
    """Uniform(-s, s) matrix with s = sqrt(6 / (rows + cols))."""
    if rows < 1 or cols < 1:
        raise ValidationError(f"glorot_init needs positive dims, got ({rows}, {cols})")
    s = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-s, s, size=(rows, cols))


@dataclass
class AdamState:
    """First/second-moment accumulators for Adam, keyed like the param dict."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update, applied to `params` in place."""
    if params.keys() != grads.keys():
        missing = params.keys() ^ grads.keys()
        raise ValidationError(f"params and grads must share keys; mismatch on {sorted(missing)}")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(
                f"adam_step: grad shape {g.shape} != param shape {p.shape} for {name!r}"
            )
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def finite_difference_check(
    loss_and_grads: Callable[[], tuple[float, dict[str, np.ndarray]]],
    params: dict[str, np.ndarray],
    eps: float = 1e-5,
) -> float:
    """Compare analytic gradients against central differences.

    `loss_and_grads` recomputes the loss and its analytic gradients from
    the current contents of `params` (which this function perturbs one
    coordinate at a time, restoring each). Returns the maximum relative
    error ``|a - n| / max(1e-8, |a| + |n|)`` over every coordinate.
    """
    if eps <= 0:
        raise ValidationError(f"eps must be positive, got {eps}")
    _, analytic = loss_and_grads()
    worst = 0.0
    for name, theta in params.items():
        if name not in analytic:
            raise ValidationError(f"analytic gradients missing entry {name!r}")
        g = analytic[name]
        if g.shape != theta.shape:
            raise ShapeError(
                f"gradient shape {g.shape} != param shape {theta.shape} for {name!r}"
            )
        for i in range(theta.size):
            orig = theta.flat[i]
            theta.flat[i] = orig + eps
            lp = loss_and_grads()[0]
            theta.flat[i] = orig - eps
            lm = loss_and_grads()[0]
            theta.flat[i] = orig
            numeric = (lp - lm) / (2.0 * eps)
            a = float(g.flat[i])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            if err > worst:
                worst = err
    return worst
