import os
import struct
from pathlib import Path

import numpy as np
import pytest

from gatfusion.numerics import make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def encode_idx_images(pixels: np.ndarray) -> bytes:
    n, r, c = pixels.shape
    return struct.pack(">IIII", IDX_IMAGES_MAGIC, n, r, c) + \
        np.ascontiguousarray(pixels, dtype=np.uint8).tobytes()


def encode_idx_labels(labels) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8)
    return struct.pack(">II", IDX_LABELS_MAGIC, labels.size) + labels.tobytes()


def synthetic_digit_images(n: int, seed: int = 0):
    """Classifiable 28x28 stand-in images: two class-coded bands plus noise.

    Class c paints row c (upper half, visible to both upper crops) and row
    14+c (lower half) at a random intensity, over uniform background noise.
    Every crop carries the class signal, so the pseudo-modality pipeline
    behaves like it does on real digit data.
    """
    rng = make_rng(seed)
    per = n // 10 + 1
    labels = np.tile(np.arange(10), per)[:n]
    labels = labels[rng.permutation(n)]
    pixels = rng.integers(0, 70, size=(n, 28, 28))
    intensity = rng.integers(150, 230, size=n)
    for i, c in enumerate(labels):
        pixels[i, c, :] = intensity[i]
        pixels[i, 14 + c, :] = intensity[i]
    return pixels.astype(np.uint8), labels.astype(np.int64)


@pytest.fixture(scope="session")
def synth_idx_paths(tmp_path_factory):
    """IDX image/label files for 600 synthetic digits."""
    base = tmp_path_factory.mktemp("idx")
    pixels, labels = synthetic_digit_images(600, seed=11)
    images_path = base / "images-idx3-ubyte"
    labels_path = base / "labels-idx1-ubyte"
    images_path.write_bytes(encode_idx_images(pixels))
    labels_path.write_bytes(encode_idx_labels(labels))
    return images_path, labels_path


def find_mnist_dir():
    """Locate real MNIST IDX files, if the user provided them."""
    candidates = []
    env = os.environ.get("GATFUSION_MNIST_DIR")
    if env:
        candidates.append(Path(env))
    candidates.append(Path(__file__).parent / "data" / "mnist")
    names = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
    for cand in candidates:
        if all((cand / name).exists() for name in names):
            return cand
    return None


@pytest.fixture(scope="session")
def mnist_paths():
    """Paths to the real MNIST training pair, or a skip."""
    found = find_mnist_dir()
    if found is None:
        pytest.skip(
            "real MNIST IDX files not found; place train-images-idx3-ubyte and "
            "train-labels-idx1-ubyte under tests/data/mnist/ or set "
            "GATFUSION_MNIST_DIR"
        )
    return found / "train-images-idx3-ubyte", found / "train-labels-idx1-ubyte"
