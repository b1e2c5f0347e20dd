#!/usr/bin/env python3
"""Export the scikit-learn handwritten digits (1797 8x8 images) as IDX files.

Writes data/{train,test}-{images,labels}.idx with a deterministic stratified
80/20 split. Pixel intensities 0..16 are rescaled to 0..255 bytes.
"""
import struct
import sys
from pathlib import Path

import numpy as np
from sklearn.datasets import load_digits


def write_images(path: Path, images: np.ndarray) -> None:
    n, h, w = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, h, w))
        f.write(images.astype(np.uint8).tobytes())


def write_labels(path: Path, labels: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main() -> None:
    out_dir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).resolve().parent.parent / "data"
    out_dir.mkdir(parents=True, exist_ok=True)

    digits = load_digits()
    images = np.round(digits.images / 16.0 * 255.0).astype(np.uint8)
    labels = digits.target

    rng = np.random.default_rng(0)
    train_idx, test_idx = [], []
    for cls in range(10):
        idx = np.flatnonzero(labels == cls)
        rng.shuffle(idx)
        cut = int(round(len(idx) * 0.8))
        train_idx.extend(idx[:cut])
        test_idx.extend(idx[cut:])
    train_idx = np.sort(np.array(train_idx))
    test_idx = np.sort(np.array(test_idx))

    write_images(out_dir / "train-images.idx", images[train_idx])
    write_labels(out_dir / "train-labels.idx", labels[train_idx])
    write_images(out_dir / "test-images.idx", images[test_idx])
    write_labels(out_dir / "test-labels.idx", labels[test_idx])
    print(f"train: {len(train_idx)}  test: {len(test_idx)}  -> {out_dir}")


if __name__ == "__main__":
    main()
