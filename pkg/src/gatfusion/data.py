"""Datasets: IDX image files, pseudo-modality crops, missing blocks, CSV IO.

A :class:`MultiModalDataset` holds one float64 feature block per modality,
a binary availability mask (block-wise: a node either has a modality's
whole block or none of it), integer labels, and string node ids. Missing
blocks are stored as zero rows and guarded by the mask; nothing downstream
may read them.

The image protocol turns grayscale digit images into three non-overlapping
crops (lower half, upper-left, upper-right), flattened row-major and scaled
to [0, 1]: distinct views of one underlying object standing in for real
multi-modal measurements.
"""

from __future__ import annotations

import csv
import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError, ValidationError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

_COLUMN_RE = re.compile(r"^m([1-9][0-9]*)_(.+)$")


@dataclass(frozen=True)
class IdxImages:
    """Decoded IDX image file: pixels (count, rows, cols) uint8."""

    pixels: np.ndarray

    @property
    def count(self) -> int:
        return self.pixels.shape[0]

    @property
    def rows(self) -> int:
        return self.pixels.shape[1]

    @property
    def cols(self) -> int:
        return self.pixels.shape[2]


def parse_idx(data: bytes):
    """Decode IDX bytes into :class:`IdxImages` or a label vector.

    Accepts the two big-endian magics 0x00000803 (images) and 0x00000801
    (labels); anything else, any truncation, or trailing bytes is a
    format error. Label values are validated to the digit range [0, 9].
    """
    if len(data) < 4:
        raise FormatError("IDX data shorter than its magic number")
    (magic,) = struct.unpack(">I", data[:4])
    if magic == IDX_IMAGES_MAGIC:
        if len(data) < 16:
            raise FormatError("IDX image header truncated (need 16 bytes)")
        count, rows, cols = struct.unpack(">III", data[4:16])
        expected = 16 + count * rows * cols
        if len(data) != expected:
            raise FormatError(
                f"IDX image payload has {len(data)} bytes, expected {expected}"
            )
        pixels = np.frombuffer(data, dtype=np.uint8, offset=16)
        return IdxImages(pixels=pixels.reshape(count, rows, cols))
    if magic == IDX_LABELS_MAGIC:
        if len(data) < 8:
            raise FormatError("IDX label header truncated (need 8 bytes)")
        (count,) = struct.unpack(">I", data[4:8])
        expected = 8 + count
        if len(data) != expected:
            raise FormatError(
                f"IDX label payload has {len(data)} bytes, expected {expected}"
            )
        labels = np.frombuffer(data, dtype=np.uint8, offset=8)
        if labels.size and labels.max() > 9:
            raise FormatError(
                f"IDX label value {int(labels.max())} outside the digit range [0, 9]"
            )
        return labels.astype(np.int64)
    raise FormatError(f"unrecognized IDX magic 0x{magic:08x} at offset 0")


def load_idx(path):
    """Read and decode one IDX file."""
    return parse_idx(Path(path).read_bytes())


def select_balanced(images: IdxImages, labels: np.ndarray, per_class: int):
    """First `per_class` file-order instances of every distinct label.

    Returns (pixels, labels, original_indices), all in ascending original
    file order.
    """
    if per_class < 1:
        raise ValidationError(f"per_class must be positive, got {per_class}")
    labels = np.asarray(labels)
    if labels.shape != (images.count,):
        raise ShapeError(
            f"labels length {labels.shape} does not match {images.count} images"
        )
    chosen = []
    for value in np.unique(labels):
        idx = np.flatnonzero(labels == value)
        if idx.size < per_class:
            raise ValidationError(
                f"class {int(value)} has only {idx.size} instances, need {per_class}"
            )
        chosen.append(idx[:per_class])
    keep = np.sort(np.concatenate(chosen))
    return images.pixels[keep], labels[keep], keep


def crop3(pixels: np.ndarray) -> list[np.ndarray]:
    """Split 28x28 images into three flattened crops scaled to [0, 1].

    Modality 1 is the lower half (rows 14-27, 392 features), modality 2
    the upper-left block (rows 0-13, cols 0-8, 126 features), modality 3
    the upper-right block (rows 0-13, cols 9-27, 266 features). The three
    crops partition every image exactly.
    """
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[1:] != (28, 28):
        raise ValidationError(
            f"crop3 expects (n, 28, 28) images, got {pixels.shape}"
        )
    scaled = pixels.astype(np.float64) / 255.0
    n = scaled.shape[0]
    m1 = scaled[:, 14:28, :].reshape(n, -1)
    m2 = scaled[:, 0:14, 0:9].reshape(n, -1)
    m3 = scaled[:, 0:14, 9:28].reshape(n, -1)
    return [np.ascontiguousarray(m1), np.ascontiguousarray(m2),
            np.ascontiguousarray(m3)]


def _default_feature_names(dims: list[int]) -> list[list[str]]:
    return [[f"x{j}" for j in range(d)] for d in dims]


@dataclass
class MultiModalDataset:
    """Node features split by modality, with block-wise availability."""

    features: list[np.ndarray]
    mask: np.ndarray
    labels: np.ndarray
    num_classes: int
    ids: list[str] = field(default_factory=list)
    feature_names: list[list[str]] = field(default_factory=list)

    def __post_init__(self):
        if not self.features:
            raise ValidationError("a dataset needs at least one modality")
        feats = [np.ascontiguousarray(f, dtype=np.float64) for f in self.features]
        n = feats[0].shape[0]
        for m, f in enumerate(feats):
            if f.ndim != 2 or f.shape[0] != n:
                raise ShapeError(f"modality {m} block must be 2-D with {n} rows")
        mask = np.asarray(self.mask)
        if mask.shape != (n, len(feats)):
            raise ShapeError(
                f"mask must have shape ({n}, {len(feats)}), got {mask.shape}"
            )
        if not np.all((mask == 0) | (mask == 1)):
            raise ValidationError("mask entries must be 0 or 1")
        mask = mask.astype(bool)
        if n and np.any(~mask.any(axis=1)):
            bad = int(np.flatnonzero(~mask.any(axis=1))[0])
            raise ValidationError(f"node {bad} has no available modality")
        labels = np.asarray(self.labels)
        if labels.shape != (n,):
            raise ShapeError(f"labels must have shape ({n},), got {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise ValidationError("labels must be integers")
        if self.num_classes < 1:
            raise ValidationError("num_classes must be positive")
        if n and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValidationError(
                f"labels must lie in [0, {self.num_classes})"
            )
        for m, f in enumerate(feats):
            off = ~mask[:, m]
            if np.any(f[off] != 0.0):
                raise ValidationError(
                    f"modality {m} has nonzero entries in masked-out rows"
                )
        ids = list(self.ids) if self.ids else [str(i) for i in range(n)]
        if len(ids) != n:
            raise ShapeError(f"ids must have length {n}, got {len(ids)}")
        if len(set(ids)) != n:
            raise ValidationError("node ids must be unique")
        names = self.feature_names or _default_feature_names([f.shape[1] for f in feats])
        if len(names) != len(feats) or any(
            len(ns) != f.shape[1] for ns, f in zip(names, feats)
        ):
            raise ShapeError("feature_names must match the modality widths")
        self.features = feats
        self.mask = mask
        self.labels = labels.astype(np.int64)
        self.ids = ids
        self.feature_names = [list(ns) for ns in names]

    @property
    def num_nodes(self) -> int:
        return self.features[0].shape[0]

    @property
    def num_modalities(self) -> int:
        return len(self.features)

    @property
    def feature_dims(self) -> list[int]:
        return [f.shape[1] for f in self.features]

    def is_complete(self) -> bool:
        return bool(self.mask.all())

    def subset(self, node_ids) -> "MultiModalDataset":
        """New dataset holding the given nodes, in the given order."""
        node_ids = np.asarray(node_ids)
        return MultiModalDataset(
            features=[f[node_ids] for f in self.features],
            mask=self.mask[node_ids],
            labels=self.labels[node_ids],
            num_classes=self.num_classes,
            ids=[self.ids[i] for i in node_ids],
            feature_names=self.feature_names,
        )


def mnist_dataset(images_path, labels_path, per_class: int = 1000) -> MultiModalDataset:
    """Balanced three-crop dataset from a pair of IDX files."""
    images = load_idx(images_path)
    if not isinstance(images, IdxImages):
        raise FormatError(f"{images_path}: expected an IDX image file")
    labels = load_idx(labels_path)
    if isinstance(labels, IdxImages):
        raise FormatError(f"{labels_path}: expected an IDX label file")
    if labels.shape[0] != images.count:
        raise FormatError(
            f"label count {labels.shape[0]} does not match image count {images.count}"
        )
    pixels, lab, keep = select_balanced(images, labels, per_class)
    feats = crop3(pixels)
    return MultiModalDataset(
        features=feats,
        mask=np.ones((lab.size, 3), dtype=bool),
        labels=lab,
        num_classes=10,
        ids=[f"img{int(i)}" for i in keep],
    )


def simulate_blockwise_missing(dataset: MultiModalDataset, p: float,
                               rng: np.random.Generator) -> MultiModalDataset:
    """Drop exactly one uniformly chosen modality on floor(p*N) nodes.

    Requires a fully available dataset (missingness is simulated once).
    Draw order: the node subset first (choice without replacement), then
    one modality per chosen node.
    """
    if not 0.0 <= p < 1.0:
        raise ValidationError(f"missing fraction must lie in [0, 1), got {p}")
    if not dataset.is_complete():
        raise ValidationError("missingness can only be simulated on a complete dataset")
    n = dataset.num_nodes
    count = math.floor(p * n)
    feats = [f.copy() for f in dataset.features]
    mask = dataset.mask.copy()
    if count:
        nodes = rng.choice(n, size=count, replace=False)
        modalities = rng.integers(0, dataset.num_modalities, size=count)
        for node, m in zip(nodes, modalities):
            mask[node, m] = False
            feats[m][node] = 0.0
    return MultiModalDataset(
        features=feats,
        mask=mask,
        labels=dataset.labels.copy(),
        num_classes=dataset.num_classes,
        ids=list(dataset.ids),
        feature_names=dataset.feature_names,
    )


def mean_impute(dataset: MultiModalDataset, train_ids) -> np.ndarray:
    """Stack all modalities, filling missing blocks with training-fold means.

    Column means are taken over the available training rows of each
    modality; a modality with no available training rows is an error.
    """
    train_ids = np.asarray(train_ids)
    blocks = []
    for m, f in enumerate(dataset.features):
        train_avail = train_ids[dataset.mask[train_ids, m]]
        if train_avail.size == 0:
            raise ValidationError(
                f"modality {m} has no available training rows to impute from"
            )
        means = f[train_avail].mean(axis=0)
        block = f.copy()
        block[~dataset.mask[:, m]] = means
        blocks.append(block)
    return np.concatenate(blocks, axis=1)


def standardize(dataset: MultiModalDataset, train_ids) -> MultiModalDataset:
    """Z-score available rows per column using training-fold statistics.

    Constant columns keep scale 1. Masked-out rows stay zero, so the
    block-missingness invariant is preserved.
    """
    train_ids = np.asarray(train_ids)
    feats = []
    for m, f in enumerate(dataset.features):
        train_avail = train_ids[dataset.mask[train_ids, m]]
        if train_avail.size == 0:
            raise ValidationError(
                f"modality {m} has no available training rows to standardize from"
            )
        mean = f[train_avail].mean(axis=0)
        std = f[train_avail].std(axis=0)
        std = np.where(std < 1e-12, 1.0, std)
        block = np.zeros_like(f)
        avail = dataset.mask[:, m]
        block[avail] = (f[avail] - mean) / std
        feats.append(block)
    return MultiModalDataset(
        features=feats,
        mask=dataset.mask.copy(),
        labels=dataset.labels.copy(),
        num_classes=dataset.num_classes,
        ids=list(dataset.ids),
        feature_names=dataset.feature_names,
    )


def write_multimodal_csv(dataset: MultiModalDataset, path) -> None:
    """Serialize to CSV: id, label, then m<k>_<name> columns per modality.

    A missing block is written as empty cells. Floats use repr, so
    reading the file back reproduces the exact values.
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        header = ["id", "label"]
        for m, names in enumerate(dataset.feature_names, start=1):
            header.extend(f"m{m}_{name}" for name in names)
        writer.writerow(header)
        for i in range(dataset.num_nodes):
            row = [dataset.ids[i], str(int(dataset.labels[i]))]
            for m, f in enumerate(dataset.features):
                if dataset.mask[i, m]:
                    row.extend(repr(float(v)) for v in f[i])
                else:
                    row.extend("" for _ in range(f.shape[1]))
            writer.writerow(row)


def write_mask_csv(dataset: MultiModalDataset, path) -> None:
    """Availability sidecar: id plus one 0/1 flag column per modality."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id"] + [f"m{m}" for m in
                                  range(1, dataset.num_modalities + 1)])
        for i in range(dataset.num_nodes):
            writer.writerow([dataset.ids[i]]
                            + [str(int(v)) for v in dataset.mask[i]])


def _parse_header(header: list[str], path) -> tuple[list[str], list[list[str]]]:
    if len(header) < 3 or header[0] != "id" or header[1] != "label":
        raise FormatError(
            f"{path}: header must start with 'id,label' followed by feature columns"
        )
    groups: list[tuple[int, list[str]]] = []
    for col in header[2:]:
        match = _COLUMN_RE.match(col)
        if not match:
            raise FormatError(
                f"{path}: column {col!r} does not match the m<k>_<name> pattern"
            )
        k = int(match.group(1))
        name = match.group(2)
        if groups and groups[-1][0] == k:
            groups[-1][1].append(name)
        else:
            groups.append((k, [name]))
    indices = [k for k, _ in groups]
    if indices != list(range(1, len(groups) + 1)):
        raise FormatError(
            f"{path}: modality blocks must be contiguous and numbered 1..M, "
            f"got {indices}"
        )
    return header, [names for _, names in groups]


def load_multimodal_csv(path) -> MultiModalDataset:
    """Parse the CSV written by :func:`write_multimodal_csv`.

    A modality block on a row must be entirely filled or entirely empty;
    anything else is a format error naming the row and column.
    """
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        _, names = _parse_header(header, path)
        dims = [len(ns) for ns in names]
        starts = np.concatenate(([0], np.cumsum(dims)))[:-1] + 2
        ids: list[str] = []
        labels: list[int] = []
        rows: list[list[np.ndarray | None]] = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise FormatError(
                    f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}"
                )
            ids.append(row[0])
            try:
                label = int(row[1])
            except ValueError:
                raise FormatError(
                    f"{path}:{lineno}: label {row[1]!r} is not an integer"
                ) from None
            if label < 0:
                raise FormatError(f"{path}:{lineno}: label must be non-negative")
            labels.append(label)
            blocks: list[np.ndarray | None] = []
            for m, (start, width) in enumerate(zip(starts, dims)):
                cells = row[start:start + width]
                filled = [c != "" for c in cells]
                if not any(filled):
                    blocks.append(None)
                    continue
                if not all(filled):
                    col = header[start + filled.index(False)]
                    raise FormatError(
                        f"{path}:{lineno}: modality {m + 1} is partially filled "
                        f"(column {col!r} is empty)"
                    )
                try:
                    blocks.append(np.array([float(c) for c in cells]))
                except ValueError:
                    bad = next(i for i, c in enumerate(cells) if not _is_float(c))
                    raise FormatError(
                        f"{path}:{lineno}: column {header[start + bad]!r} holds "
                        f"non-numeric value {cells[bad]!r}"
                    ) from None
            rows.append(blocks)
    if not rows:
        raise FormatError(f"{path}: no data rows")
    n = len(rows)
    m_count = len(dims)
    mask = np.zeros((n, m_count), dtype=bool)
    feats = [np.zeros((n, d)) for d in dims]
    for i, blocks in enumerate(rows):
        for m, block in enumerate(blocks):
            if block is not None:
                mask[i, m] = True
                feats[m][i] = block
    label_arr = np.asarray(labels, dtype=np.int64)
    return MultiModalDataset(
        features=feats,
        mask=mask,
        labels=label_arr,
        num_classes=int(label_arr.max()) + 1,
        ids=ids,
        feature_names=names,
    )


def _is_float(cell: str) -> bool:
    try:
        float(cell)
        return True
    except ValueError:
        return False
