"""Datasets: IDX image/label files and synthetic Gaussian blobs."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class IdxFormatError(ValueError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray | None = None
    n_classes: int | None = None
    tag: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float32)
        if self.inputs.ndim != 2:
            raise ValueError("inputs must be (N, input_dim)")
        if np.any(self.inputs < 0) or np.any(self.inputs > 1):
            raise ValueError("inputs must lie in [0, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.inputs),):
                raise ValueError("one label per input required")
            if self.n_classes is None:
                self.n_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
            if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
                raise ValueError("label out of range")

    def __len__(self):
        return len(self.inputs)

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx, tag: str | None = None) -> "Dataset":
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.inputs[idx], labels, self.n_classes, tag or self.tag, dict(self.meta))

    def split(self, sizes: dict[str, int], seed=0) -> dict[str, "Dataset"]:
        """Shuffle once and cut consecutive tagged splits of the given sizes."""
        if sum(sizes.values()) > len(self):
            raise ValueError("split sizes exceed dataset")
        perm = np.random.default_rng(seed).permutation(len(self))
        out, start = {}, 0
        for tag, size in sizes.items():
            out[tag] = self.subset(perm[start:start + size], tag)
            start += size
        return out


def _read_header(buf: bytes, expected_magic: int, ndim: int, what: str):
    if len(buf) < 4 + 4 * ndim:
        raise IdxFormatError(f"{what}: truncated header")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != expected_magic:
        raise IdxFormatError(f"{what}: wrong magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    dims = struct.unpack(">" + "I" * ndim, buf[4:4 + 4 * ndim])
    payload = buf[4 + 4 * ndim:]
    need = int(np.prod(dims, dtype=np.int64))
    if len(payload) < need:
        raise IdxFormatError(f"{what}: truncated payload ({len(payload)} of {need} bytes)")
    if len(payload) > need:
        raise IdxFormatError(f"{what}: {len(payload) - need} trailing bytes")
    return dims, np.frombuffer(payload, dtype=np.uint8)


def parse_idx(image_bytes: bytes, label_bytes: bytes) -> Dataset:
    (n, rows, cols), pixels = _read_header(image_bytes, IDX_IMAGES, 3, "images")
    (n_labels,), labels = _read_header(label_bytes, IDX_LABELS, 1, "labels")
    if n != n_labels:
        raise IdxFormatError(f"image/label count mismatch: {n} vs {n_labels}")
    inputs = pixels.reshape(n, rows * cols).astype(np.float32) / 255.0
    n_classes = int(labels.max()) + 1 if n else 0
    return Dataset(inputs, labels.astype(np.int64), n_classes, meta={"source": "idx", "shape": (rows, cols)})


def load_idx(images_path, labels_path) -> Dataset:
    return parse_idx(Path(images_path).read_bytes(), Path(labels_path).read_bytes())


def encode_idx(images: np.ndarray, labels: np.ndarray) -> tuple[bytes, bytes]:
    """Serialise uint8 images ``(n, rows, cols)`` and labels to IDX bytes."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    img = struct.pack(">IIII", IDX_IMAGES, *images.shape) + images.tobytes()
    lab = struct.pack(">II", IDX_LABELS, len(labels)) + labels.tobytes()
    return img, lab


def synth_blobs(C: int, N: int, input_dim: int, spread: float, seed=0, center_width: float = 1.0,
                fragile_dims: int = 0, fragile_scale: float = 1.0) -> Dataset:
    """Balanced Gaussian blobs, clipped to the unit cube.

    Centres are uniform in a cube of side ``center_width`` around 0.5. The
    last ``fragile_dims`` coordinates have both their centre offsets and
    their noise shrunk by ``fragile_scale``: they stay as informative as the
    others but move by less than a typical perturbation budget.
    """
    if C < 2 or N < C:
        raise ValueError("need C >= 2 and N >= C")
    if spread < 0 or not 0 < center_width <= 1:
        raise ValueError("spread must be >= 0 and center_width in (0, 1]")
    if not 0 <= fragile_dims <= input_dim or not fragile_scale > 0:
        raise ValueError("fragile_dims must lie in [0, input_dim] and fragile_scale be positive")
    rng = np.random.default_rng(seed)
    scale = np.ones(input_dim)
    scale[input_dim - fragile_dims:] = fragile_scale
    centers = 0.5 + center_width * scale * (rng.random((C, input_dim)) - 0.5)
    labels = np.arange(N) % C
    labels = labels[rng.permutation(N)]
    noise = rng.normal(0.0, 1.0, (N, input_dim)) * spread * scale
    inputs = np.clip(centers[labels] + noise, 0.0, 1.0)
    meta = {"source": "synth", "C": C, "N": N, "input_dim": input_dim, "spread": spread,
            "seed": seed, "center_width": center_width, "fragile_dims": fragile_dims,
            "fragile_scale": fragile_scale}
    ds = Dataset(inputs, labels, C, meta=meta)
    ds.meta["centers"] = centers.astype(np.float32)
    return ds
