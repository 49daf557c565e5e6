"""Write the bundled digit set as IDX files.

Source: ``mnist_5k.csv.gz`` from the mlxtend wheel (5000 MNIST images, 500
per class, BSD-3 / CC-BY), pixels 0-255 with the label in the last column.

    pip download mlxtend --no-deps -d /tmp/mlx
    python scripts/build_digits_idx.py /tmp/mlx/mlxtend-*.whl
"""

import gzip
import io
import sys
import zipfile
from pathlib import Path

import numpy as np

from drkit.data import BUNDLED_IMAGES, BUNDLED_LABELS, LabeledDataset, write_idx

OUT = Path(__file__).resolve().parents[1] / "src" / "drkit" / "data"


def main(wheel: str) -> None:
    with zipfile.ZipFile(wheel) as zf:
        raw = zf.read("mlxtend/data/data/mnist_5k.csv.gz")
    table = np.loadtxt(io.TextIOWrapper(gzip.GzipFile(fileobj=io.BytesIO(raw))), delimiter=",")
    pixels = table[:, :-1].reshape(-1, 1, 28, 28)
    labels = table[:, -1].astype(np.int64)
    ds = LabeledDataset((pixels / 255.0).astype(np.float32), labels, provenance="mlxtend mnist_5k")
    write_idx(ds, OUT / BUNDLED_IMAGES, OUT / BUNDLED_LABELS)
    print(f"wrote {len(ds)} images to {OUT}")


if __name__ == "__main__":
    main(sys.argv[1])
