"""Datasets: synthetic generation, IDX / CIFAR binary ingestion, and the
poisoned-set container.

Container layout (all integers little-endian)::

    b"SEPD"  u16 version  u32 manifest_len  manifest (UTF-8 JSON)
    u64 payload_len  payload = images as float32 [N, C, H, W] then labels as int32 [N]

The manifest stores the SHA-256 of the payload and of the dataset, so any
tampered byte is detected on load.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .budget import PerturbationBudget, budget_violations, norm_stats
from .errors import (
    BadMagicError,
    BudgetViolationError,
    CountMismatchError,
    DataError,
    DigestMismatchError,
    TruncatedFileError,
)

SPLITS = ("train", "test", "validation-heldout")

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32

CONTAINER_MAGIC = b"SEPD"
CONTAINER_VERSION = 1


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Images in [0, 1] stored as float32 [N, C, H, W] with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str = "train"

    def __post_init__(self):
        images = np.array(self.images, dtype=np.float32)
        labels = np.array(self.labels, dtype=np.int64).reshape(-1)
        if images.ndim != 4:
            raise DataError(f"images must be [count, channels, height, width], got shape {list(images.shape)}")
        if images.shape[0] == 0:
            raise DataError("dataset must contain at least one sample")
        if labels.shape[0] != images.shape[0]:
            raise CountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
        if not np.all(np.isfinite(images)) or images.min() < 0.0 or images.max() > 1.0:
            raise DataError("pixel values must lie in [0, 1]")
        if self.class_count < 2:
            raise DataError("class_count must be >= 2")
        if labels.min() < 0 or labels.max() >= self.class_count:
            raise DataError(f"labels must lie in [0, {self.class_count})")
        if self.split not in SPLITS:
            raise DataError(f"split must be one of {SPLITS}, got {self.split!r}")
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices, split=None) -> "LabeledDataset":
        idx = np.asarray(indices)
        return LabeledDataset(self.images[idx], self.labels[idx], self.class_count, split or self.split)

    def with_images(self, images) -> "LabeledDataset":
        return LabeledDataset(np.asarray(images, dtype=np.float32), self.labels, self.class_count, self.split)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps([list(self.images.shape), self.class_count]).encode())
        h.update(self.images.astype("<f4").tobytes())
        h.update(self.labels.astype("<i4").tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# synthetic data


PATTERN_FAMILIES = ("gratings", "blobs")


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a desk-scale image classification set.

    Each class owns a pattern (an oriented grating or a blob placed at a
    class-specific spot) that is added with amplitude ``signal`` on a noisy
    grey background; per-sample phase, position and colour are jittered.
    ``signature`` adds a faint fixed per-class random pattern on top, a
    consistent cue that is easy to learn and easy to overwrite.
    """

    classes: int = 4
    per_class: int = 100
    test_per_class: int = 100
    image_size: int = 8
    channels: int = 3
    family: str = "gratings"
    signal: float = 0.2
    noise: float = 0.1
    signature: float = 0.0


def gen_synthetic(spec: SyntheticSpec, seed: int, split: str = "train") -> LabeledDataset:
    """Deterministically generate the ``split`` half of a synthetic set.

    Class patterns depend only on ``seed``; the samples of each split come from
    their own stream, so train and test never share a sample.
    """
    if spec.classes < 2:
        raise DataError("synthetic data needs at least 2 classes")
    count = spec.per_class if split == "train" else spec.test_per_class
    if count < 1 or spec.image_size < 2 or spec.channels < 1:
        raise DataError("degenerate synthetic spec: counts and sizes must be positive")
    if spec.family not in PATTERN_FAMILIES:
        raise DataError(f"unknown pattern family {spec.family!r}; expected one of {PATTERN_FAMILIES}")
    split_code = SPLITS.index(split)
    proto_rng = np.random.default_rng([int(seed), 101])
    rng = np.random.default_rng([int(seed), 202, split_code])

    size, ch, k = spec.image_size, spec.channels, spec.classes
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    colours = proto_rng.uniform(0.5, 1.0, size=(k, ch)) * proto_rng.choice([-1.0, 1.0], size=(k, ch))
    labels = np.repeat(np.arange(k), count)
    n = labels.size
    if spec.family == "gratings":
        angles = np.pi * np.arange(k) / k
        freq = 2 * np.pi / max(size / 2.0, 2.0)
        phase = rng.uniform(0, 2 * np.pi, size=n)
        theta = angles[labels] + rng.normal(0, 0.1, size=n)
        proj = np.cos(theta)[:, None, None] * xx + np.sin(theta)[:, None, None] * yy
        pattern = np.sin(freq * proj + phase[:, None, None])
    else:
        centres = proto_rng.uniform(0.2 * size, 0.8 * size, size=(k, 2))
        c = centres[labels] + rng.normal(0, 0.5, size=(n, 2))
        r2 = (yy - c[:, 0, None, None]) ** 2 + (xx - c[:, 1, None, None]) ** 2
        pattern = 2 * np.exp(-r2 / (2 * (size / 6.0) ** 2)) - 0.5
    tint = colours[labels] * rng.uniform(0.8, 1.2, size=(n, 1))
    images = 0.5 + spec.signal * pattern[:, None] * tint[:, :, None, None]
    if spec.signature:
        marks = proto_rng.choice([-1.0, 1.0], size=(k, ch, size, size))
        images = images + spec.signature * marks[labels]
    images = images + spec.noise * rng.normal(size=images.shape)
    order = rng.permutation(n)
    return LabeledDataset(np.clip(images[order], 0.0, 1.0), labels[order], k, split)


def split_heldout(dataset: LabeledDataset, fraction=0.05, seed=0):
    """Carve a held-out split off a training set; returns (train, heldout)."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must be in (0, 1)")
    n = len(dataset)
    n_held = max(1, int(round(fraction * n)))
    if n_held >= n:
        raise DataError("dataset too small to hold out a split")
    perm = np.random.default_rng([int(seed), 303]).permutation(n)
    held, keep = np.sort(perm[:n_held]), np.sort(perm[n_held:])
    return dataset.subset(keep, "train"), dataset.subset(held, "validation-heldout")


# ---------------------------------------------------------------------------
# IDX / CIFAR binary


def _read(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def _parse_idx(data: bytes, expected_magic: int, what: str) -> np.ndarray:
    if len(data) < 4:
        raise TruncatedFileError(f"{what}: file shorter than the 4-byte magic")
    magic = struct.unpack(">I", data[:4])[0]
    if magic != expected_magic:
        raise BadMagicError(f"0x{magic:08x}", f"0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise TruncatedFileError(f"{what}: header needs {header} bytes, got {len(data)}")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    need = int(np.prod(dims))
    body = data[header:]
    if len(body) < need:
        raise TruncatedFileError(f"{what}: expected {need} data bytes, got {len(body)}")
    if len(body) > need:
        raise DataError(f"{what}: {len(body) - need} trailing bytes after data")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, class_count=None, split="train") -> LabeledDataset:
    """Load an MNIST-style IDX image/label file pair, scaling pixels by 1/255."""
    images = _parse_idx(_read(images_path), IDX_IMAGES_MAGIC, "images")
    labels = _parse_idx(_read(labels_path), IDX_LABELS_MAGIC, "labels")
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if images.shape[0] == 0:
        raise DataError("IDX files contain zero items")
    if class_count is None:
        class_count = max(int(labels.max()) + 1, 2)
    pixels = images.astype(np.float32)[:, None] / np.float32(255)
    return LabeledDataset(pixels, labels.astype(np.int64), class_count, split)


def write_idx(dataset: LabeledDataset, images_path, labels_path) -> None:
    """Export a single-channel dataset as IDX, quantising pixels to u8."""
    if dataset.images.shape[1] != 1:
        raise DataError("IDX export needs single-channel images")
    n, _, h, w = dataset.images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(quantize_u8(dataset.images)[:, 0].tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


def load_cifar_binary(paths, class_count=10, split="train") -> LabeledDataset:
    """Load one or more CIFAR-10 binary batches (1 label byte + 3072 pixels)."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    chunks = []
    for path in paths:
        data = _read(path)
        if len(data) % CIFAR_RECORD:
            raise DataError(f"{path}: size {len(data)} is not a multiple of the {CIFAR_RECORD}-byte record")
        chunks.append(np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD))
    records = np.concatenate(chunks) if chunks else np.zeros((0, CIFAR_RECORD), np.uint8)
    if records.shape[0] == 0:
        raise DataError("CIFAR binary input holds zero records")
    labels = records[:, 0].astype(np.int64)
    pixels = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255)
    return LabeledDataset(pixels, labels, class_count, split)


def write_cifar_binary(dataset: LabeledDataset, path) -> None:
    if dataset.input_shape != (3, 32, 32):
        raise DataError("CIFAR binary export needs [3, 32, 32] images")
    rec = np.empty((len(dataset), CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = dataset.labels
    rec[:, 1:] = quantize_u8(dataset.images).reshape(len(dataset), -1)
    with open(path, "wb") as fh:
        fh.write(rec.tobytes())


def quantize_u8(images) -> np.ndarray:
    """Round [0, 1] pixels to u8. Perturbations below 1/510 per pixel are lost."""
    return np.clip(np.rint(np.asarray(images, dtype=np.float64) * 255), 0, 255).astype(np.uint8)


def export_u8(dataset: LabeledDataset) -> LabeledDataset:
    """Same dataset after a u8 round trip, as a released image file would be."""
    return dataset.with_images(quantize_u8(dataset.images).astype(np.float32) / np.float32(255))


# ---------------------------------------------------------------------------
# poisoned-set container


@dataclass
class PoisonManifest:
    """Provenance of a poisoned set; ``extra`` holds method-specific fields."""

    method: str
    source_digest: str
    budget: dict
    checkpoint_epochs: list = field(default_factory=list)
    permutation_offset: int | None = None
    seed: int = 0
    norm_stats: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "source_digest": self.source_digest,
            "budget": self.budget,
            "checkpoint_epochs": list(self.checkpoint_epochs),
            "permutation_offset": self.permutation_offset,
            "seed": self.seed,
            "norm_stats": self.norm_stats,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PoisonManifest":
        return cls(**{k: d[k] for k in ("method", "source_digest", "budget", "checkpoint_epochs",
                                         "permutation_offset", "seed", "norm_stats", "extra") if k in d})


def _payload(dataset: LabeledDataset) -> bytes:
    return dataset.images.astype("<f4").tobytes() + dataset.labels.astype("<i4").tobytes()


def _budget_of(manifest: PoisonManifest):
    b = manifest.budget or {}
    if not b:
        return None
    return PerturbationBudget.from_dict(b)


def poisoned_to_bytes(dataset: LabeledDataset, manifest: PoisonManifest, clean: LabeledDataset) -> bytes:
    """Serialise after validating ``dataset`` against ``clean`` and the budget.

    Fills in the manifest's source digest and norm statistics.
    """
    if clean.images.shape != dataset.images.shape or not np.array_equal(clean.labels, dataset.labels):
        raise DataError("poisoned dataset must share shape and labels with its clean source")
    budget = _budget_of(manifest)
    if budget is not None:
        problems = budget_violations(dataset.images, clean.images, budget)
        if problems:
            raise BudgetViolationError("save rejected: " + "; ".join(problems))
    manifest.source_digest = clean.digest()
    manifest.norm_stats = norm_stats(dataset.images, clean.images)
    payload = _payload(dataset)
    meta = manifest.to_dict()
    meta["container"] = {
        "shape": list(dataset.images.shape),
        "class_count": dataset.class_count,
        "split": dataset.split,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "dataset_digest": dataset.digest(),
    }
    text = json.dumps(meta, sort_keys=True, indent=1).encode("utf-8")
    head = CONTAINER_MAGIC + struct.pack("<HI", CONTAINER_VERSION, len(text))
    return head + text + struct.pack("<Q", len(payload)) + payload


def poisoned_from_bytes(data: bytes, clean: LabeledDataset | None = None):
    """Parse a container; returns (dataset, manifest dict as stored).

    With ``clean`` given, the source digest and the norm statistics are
    recomputed and must match the manifest, and the images must respect the
    stored budget.
    """
    if len(data) < 10:
        raise TruncatedFileError("container shorter than its header")
    if data[:4] != CONTAINER_MAGIC:
        raise BadMagicError(data[:4], CONTAINER_MAGIC)
    version, mlen = struct.unpack_from("<HI", data, 4)
    if version != CONTAINER_VERSION:
        raise DataError(f"unsupported container version {version}")
    pos = 10 + mlen
    if len(data) < pos + 8:
        raise TruncatedFileError("container manifest truncated")
    try:
        meta = json.loads(data[10:pos].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DigestMismatchError(f"manifest is corrupt: {exc}") from exc
    (plen,) = struct.unpack_from("<Q", data, pos)
    payload = data[pos + 8:]
    if len(payload) != plen:
        raise TruncatedFileError(f"payload expected {plen} bytes, got {len(payload)}")
    info = meta.get("container", {})
    if hashlib.sha256(payload).hexdigest() != info.get("payload_sha256"):
        raise DigestMismatchError("payload digest does not match the manifest")
    shape = info["shape"]
    n_pix = int(np.prod(shape))
    if plen != 4 * n_pix + 4 * shape[0]:
        raise DataError("payload size inconsistent with the stored shape")
    images = np.frombuffer(payload[: 4 * n_pix], dtype="<f4").reshape(shape)
    labels = np.frombuffer(payload[4 * n_pix:], dtype="<i4")
    dataset = LabeledDataset(images, labels, info["class_count"], info["split"])
    if dataset.digest() != info.get("dataset_digest"):
        raise DigestMismatchError("dataset digest does not match the manifest")
    if clean is not None:
        if clean.digest() != meta.get("source_digest"):
            raise DigestMismatchError("clean dataset does not match the manifest's source digest")
        stats = norm_stats(dataset.images, clean.images)
        if stats != meta.get("norm_stats"):
            raise DigestMismatchError("recomputed norm statistics differ from the manifest")
        budget = PerturbationBudget.from_dict(meta["budget"]) if meta.get("budget") else None
        if budget is not None:
            problems = budget_violations(dataset.images, clean.images, budget)
            if problems:
                raise BudgetViolationError("stored perturbation exceeds its budget: " + "; ".join(problems))
    return dataset, meta


def save_poisoned(dataset, manifest, path, clean) -> None:
    data = poisoned_to_bytes(dataset, manifest, clean)
    Path(path).write_bytes(data)


def load_poisoned(path, clean=None):
    return poisoned_from_bytes(Path(path).read_bytes(), clean)
