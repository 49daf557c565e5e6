"""IDX ingestion, deterministic subsets, and PGM/PPM export."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

BUNDLED_IMAGES = "digits-images.idx3-ubyte"
BUNDLED_LABELS = "digits-labels.idx1-ubyte"


class IDXFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class LabeledDataset:
    """Images of shape (N, C, H, W) in [0, 1] with integer class labels."""

    images: np.ndarray
    labels: np.ndarray
    split: str = "all"
    provenance: str = ""
    indices: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixels must lie in [0, 1]")
        if self.indices is None:
            object.__setattr__(self, "indices", np.arange(len(self.images)))

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx: Sequence[int], split: Optional[str] = None) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(
            self.images[idx], self.labels[idx], split or self.split, self.provenance, self.indices[idx]
        )

    def relabel(self, task: str) -> "LabeledDataset":
        """Labels for another task on the same inputs (``digits`` or ``parity``)."""
        return replace(self, labels=task_labels(self.labels, task))

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.round(self.images * 255).astype(np.uint8).tobytes())
        h.update(self.labels.astype("<i8").tobytes())
        return h.hexdigest()[:16]


def task_labels(digits: np.ndarray, task: str) -> np.ndarray:
    if task == "digits":
        return np.asarray(digits, dtype=np.int64)
    if task == "parity":
        return np.asarray(digits, dtype=np.int64) % 2
    raise ValueError(f"unknown task {task!r}; expected 'digits' or 'parity'")


def _read_header(buf: bytes, magic: int, what: str) -> tuple:
    if len(buf) < 4:
        raise IDXFormatError(f"{what} file truncated: {len(buf)} bytes, no magic number", 0)
    (got,) = struct.unpack(">I", buf[:4])
    if got != magic:
        raise IDXFormatError(f"{what} file has magic 0x{got:08X}, expected 0x{magic:08X}", 0)
    ndim = magic & 0xFF
    need = 4 + 4 * ndim
    if len(buf) < need:
        raise IDXFormatError(f"{what} header truncated: expected {need} bytes, got {len(buf)}", len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:need])
    expected = need + int(np.prod(dims, dtype=np.int64))
    if len(buf) != expected:
        raise IDXFormatError(
            f"{what} file truncated: expected {expected} bytes for dims {dims}, got {len(buf)}",
            min(len(buf), expected),
        )
    return dims, need


def load_idx(images_path, labels_path, split: str = "all") -> LabeledDataset:
    """Read an IDX image/label pair; pixels are divided by 255."""
    ibuf = Path(images_path).read_bytes()
    lbuf = Path(labels_path).read_bytes()
    idims, ioff = _read_header(ibuf, IMAGES_MAGIC, "images")
    ldims, loff = _read_header(lbuf, LABELS_MAGIC, "labels")
    if idims[0] != ldims[0]:
        raise IDXFormatError(f"image count {idims[0]} differs from label count {ldims[0]}", 4)
    n, h, w = idims
    pixels = np.frombuffer(ibuf, dtype=np.uint8, offset=ioff).reshape(n, 1, h, w)
    labels = np.frombuffer(lbuf, dtype=np.uint8, offset=loff).astype(np.int64)
    images = (pixels.astype(np.float32) / np.float32(255.0)).astype(np.float32)
    return LabeledDataset(images, labels, split, f"{images_path}|{labels_path}")


def write_idx(ds: LabeledDataset, images_path, labels_path) -> None:
    n, c, h, w = ds.images.shape
    if c != 1:
        raise ValueError("IDX export supports single-channel images only")
    pixels = np.round(ds.images * 255).astype(np.uint8)
    _atomic_write(images_path, struct.pack(">IIII", IMAGES_MAGIC, n, h, w) + pixels.tobytes())
    _atomic_write(labels_path, struct.pack(">II", LABELS_MAGIC, n) + ds.labels.astype(np.uint8).tobytes())


def bundled_digits() -> LabeledDataset:
    """The 5000-image MNIST subset shipped with the package."""
    root = resources.files("drkit") / "data"
    with resources.as_file(root / BUNDLED_IMAGES) as ip, resources.as_file(root / BUNDLED_LABELS) as lp:
        return load_idx(ip, lp)


def fixed_subset(ds: LabeledDataset, n: int, seed: int) -> LabeledDataset:
    if n < 0 or n > len(ds):
        raise ValueError(f"subset size {n} outside [0, {len(ds)}]")
    order = np.random.default_rng(seed).permutation(len(ds))
    return ds.take(order[:n], split=f"{ds.split}[subset n={n} seed={seed}]")


def train_test_split(ds: LabeledDataset, n_test: int, seed: int = 2024) -> tuple[LabeledDataset, LabeledDataset]:
    order = np.random.default_rng(seed).permutation(len(ds))
    return ds.take(np.sort(order[n_test:]), "train"), ds.take(np.sort(order[:n_test]), "test")


# ---------------------------------------------------------------------------
# image export


def _to_hwc_bytes(x: np.ndarray) -> tuple[bytes, int, int, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3 and x.shape[0] == 1:
        x = x[0]
    if x.ndim == 2:
        gray = True
        h, w = x.shape
    elif x.ndim == 3 and x.shape[0] == 3:
        gray = False
        h, w = x.shape[1:]
        x = x.transpose(1, 2, 0)
    else:
        raise ValueError(f"expected (H, W), (1, H, W) or (3, H, W) image, got shape {x.shape}")
    if not np.isfinite(x).all() or x.min() < 0 or x.max() > 1:
        raise ValueError("pixel values outside [0, 1]; clamp before export")
    return np.round(x * 255).astype(np.uint8).tobytes(), w, h, gray


def encode_pnm(x: np.ndarray) -> bytes:
    data, w, h, gray = _to_hwc_bytes(x)
    return f"{'P5' if gray else 'P6'}\n{w} {h}\n255\n".encode("ascii") + data


def write_ppm(x: np.ndarray, path) -> None:
    """Binary PGM (grayscale) or PPM (RGB), 8-bit."""
    _atomic_write(path, encode_pnm(x))


def panel(original: np.ndarray, adversarial: np.ndarray, epsilon: float) -> np.ndarray:
    """original | adversarial | difference, with 1-pixel white separators.

    The difference is mapped to ``0.5 + (x' - x) * 255 / (2 * epsilon)`` so a
    full-budget change spans the whole grey range.
    """
    a = np.asarray(original, dtype=np.float64)
    b = np.asarray(adversarial, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    diff = np.clip(0.5 + (b - a) * 255.0 / (2 * epsilon), 0.0, 1.0)
    sep = np.ones(a.shape[:2] + (1,))
    return np.concatenate([a, sep, b, sep, diff], axis=2)


def write_panel(original: np.ndarray, adversarial: np.ndarray, epsilon: float, path) -> None:
    write_ppm(panel(original, adversarial, epsilon), path)


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)
