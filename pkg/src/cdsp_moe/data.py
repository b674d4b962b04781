"""IDX image/label files, the mixed three-task stream, and a synthetic conflict fixture."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .linalg import Rng

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
SIDE = 28
N_PIXELS = SIDE * SIDE
N_CLASSES = 10


class IdxFormatError(ValueError):
    pass


class UnsupportedShapeError(IdxFormatError):
    pass


def parse_idx_images(buf: bytes) -> np.ndarray:
    if len(buf) < 16:
        raise IdxFormatError("image file shorter than its 16-byte header")
    magic, count, rows, cols = struct.unpack(">IIII", buf[:16])
    if magic != IMAGE_MAGIC:
        raise IdxFormatError(f"bad image magic 0x{magic:08x}")
    if (rows, cols) != (SIDE, SIDE):
        raise UnsupportedShapeError(f"only 28x28 images are supported, got {rows}x{cols}")
    need = 16 + count * N_PIXELS
    if len(buf) < need:
        raise IdxFormatError(f"truncated image payload: {len(buf)} bytes, need {need}")
    pixels = np.frombuffer(buf, dtype=np.uint8, count=count * N_PIXELS, offset=16)
    return pixels.reshape(count, N_PIXELS).astype(np.float64) / 255.0


def parse_idx_labels(buf: bytes) -> np.ndarray:
    if len(buf) < 8:
        raise IdxFormatError("label file shorter than its 8-byte header")
    magic, count = struct.unpack(">II", buf[:8])
    if magic != LABEL_MAGIC:
        raise IdxFormatError(f"bad label magic 0x{magic:08x}")
    if len(buf) < 8 + count:
        raise IdxFormatError(f"truncated label payload: {len(buf) - 8} of {count} bytes")
    labels = np.frombuffer(buf, dtype=np.uint8, count=count, offset=8).astype(np.int64)
    if labels.size and labels.max() >= N_CLASSES:
        raise ValueError(f"label {labels.max()} out of range 0..9")
    return labels


def encode_idx_images(images: np.ndarray) -> bytes:
    images = np.asarray(images, dtype=np.float64).reshape(-1, N_PIXELS)
    raw = np.rint(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)
    return struct.pack(">IIII", IMAGE_MAGIC, len(raw), SIDE, SIDE) + raw.tobytes()


def encode_idx_labels(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels).astype(np.uint8)
    return struct.pack(">II", LABEL_MAGIC, len(labels)) + labels.tobytes()


@dataclass
class LabeledImageSet:
    images: np.ndarray
    labels: np.ndarray
    task_id: int

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")

    def __len__(self):
        return len(self.labels)

    def head(self, n: int) -> "LabeledImageSet":
        return LabeledImageSet(self.images[:n], self.labels[:n], self.task_id)

    def split(self, holdout_frac: float = 0.1) -> tuple["LabeledImageSet", "LabeledImageSet"]:
        """Train part and the trailing ``holdout_frac`` as the evaluation part."""
        n_hold = int(round(len(self) * holdout_frac))
        cut = len(self) - n_hold
        return (LabeledImageSet(self.images[:cut], self.labels[:cut], self.task_id),
                LabeledImageSet(self.images[cut:], self.labels[cut:], self.task_id))


def load_idx_set(images_path, labels_path, task_id: int) -> LabeledImageSet:
    images = parse_idx_images(Path(images_path).read_bytes())
    labels = parse_idx_labels(Path(labels_path).read_bytes())
    return LabeledImageSet(images, labels, task_id)


def save_idx_set(ds: LabeledImageSet, images_path, labels_path) -> None:
    Path(images_path).write_bytes(encode_idx_images(ds.images))
    Path(labels_path).write_bytes(encode_idx_labels(ds.labels))


def unified_label(task_id, class_label):
    return 10 * np.asarray(task_id) + np.asarray(class_label)


def split_unified(label):
    label = np.asarray(label)
    return label // 10, label % 10


@dataclass
class MixedBatch:
    inputs: np.ndarray
    task_ids: np.ndarray
    unified_labels: np.ndarray
    # real-valued regression targets; only the synthetic fixture sets these
    targets: np.ndarray | None = None

    def __len__(self):
        return len(self.inputs)


@dataclass
class MixedStream:
    """All retained examples of the three tasks, reshuffled every epoch."""

    inputs: np.ndarray
    task_ids: np.ndarray
    unified_labels: np.ndarray
    batch_size: int
    seed: int
    n_tasks: int = 3

    def __len__(self):
        return len(self.inputs)

    def n_batches(self) -> int:
        return -(-len(self) // self.batch_size)

    def batches(self, epoch: int = 0, shuffle: bool = True) -> list[MixedBatch]:
        idx = Rng(self.seed).spawn(epoch).permutation(len(self)) if shuffle else np.arange(len(self))
        out = []
        for start in range(0, len(idx), self.batch_size):
            sel = idx[start:start + self.batch_size]
            out.append(MixedBatch(self.inputs[sel], self.task_ids[sel], self.unified_labels[sel]))
        return out


def build_mixed_stream(sets, batch_size: int, subsample_per_task: int | None = None,
                       seed: int = 0) -> MixedStream:
    ids = sorted(s.task_id for s in sets)
    if len(set(ids)) != len(ids) or any(t < 0 or t > 2 for t in ids):
        raise ValueError(f"task ids must be distinct values in 0..2, got {ids}")
    parts = []
    for s in sets:
        if subsample_per_task is not None:
            if subsample_per_task > len(s):
                raise ValueError(f"subsample {subsample_per_task} exceeds task {s.task_id} size {len(s)}")
            s = s.head(subsample_per_task)
        parts.append(s)
    inputs = np.concatenate([p.images for p in parts])
    tasks = np.concatenate([np.full(len(p), p.task_id, dtype=np.int64) for p in parts])
    labels = np.concatenate([unified_label(p.task_id, p.labels) for p in parts])
    return MixedStream(inputs, tasks, labels.astype(np.int64), batch_size, seed, n_tasks=len(parts))


@dataclass
class SyntheticConflictSpec:
    input_dim: int = 8
    shared_dim: int = 4
    n_samples: int = 256
    batch_size: int = 32
    target_scale: float = 3.0
    noise: float = 0.0


def make_synthetic_conflict(spec: SyntheticConflictSpec, seed: int = 0):
    """Two regression tasks that pull a shared feature block in opposite directions.

    Both tasks see the same inputs; task 0 targets ``+w.x[:shared]`` and task 1
    targets ``-w.x[:shared]``, so at the midpoint predictor (output 0) their
    squared-error gradients are exact negations of each other.
    Returns two lists of batches, one per task.
    """
    if not spec.input_dim >= spec.shared_dim >= 1:
        raise ValueError("need input_dim >= shared_dim >= 1")
    rng = Rng(seed)
    x = rng.normal(size=(spec.n_samples, spec.input_dim))
    w = np.full(spec.shared_dim, spec.target_scale / np.sqrt(spec.shared_dim))
    base = x[:, :spec.shared_dim] @ w
    streams = []
    for task, sign in ((0, 1.0), (1, -1.0)):
        y = sign * base + spec.noise * rng.normal(size=spec.n_samples)
        batches = []
        for s in range(0, spec.n_samples, spec.batch_size):
            sl = slice(s, s + spec.batch_size)
            n = len(x[sl])
            batches.append(MixedBatch(x[sl].copy(), np.full(n, task, dtype=np.int64),
                                      np.full(n, 10 * task, dtype=np.int64), y[sl, None].copy()))
        streams.append(batches)
    return streams[0], streams[1]


@dataclass
class DataConfig:
    source: str = "procedural"        # "procedural" or "idx"
    paths: dict | None = None         # {"0": {"images": ..., "labels": ...}, "1": ..., "2": ...}
    subsample: int | None = 2000      # examples kept per task (before the hold-out split)
    holdout_frac: float = 0.1
    procedural_seed: int = 0

    def validate(self) -> "DataConfig":
        if self.source not in ("procedural", "idx"):
            raise ValueError(f"data.source must be 'procedural' or 'idx', got {self.source!r}")
        if self.source == "idx":
            paths = self.paths or {}
            for t in ("0", "1", "2"):
                for kind in ("images", "labels"):
                    if not (paths.get(t) or {}).get(kind):
                        raise ValueError(f"missing dataset path data.paths.{t}.{kind}")
        if self.source == "procedural" and not self.subsample:
            raise ValueError("data.subsample is required for procedural data")
        if not 0.0 < self.holdout_frac < 1.0:
            raise ValueError("data.holdout_frac must lie in (0, 1)")
        return self


def load_task_sets(cfg: DataConfig) -> list[LabeledImageSet]:
    """The three task sets, each cut to ``cfg.subsample`` examples."""
    cfg.validate()
    if cfg.source == "procedural":
        from .procedural import make_desk_tasks
        return make_desk_tasks(cfg.subsample, cfg.procedural_seed)
    sets = []
    for t in range(3):
        entry = cfg.paths[str(t)]
        s = load_idx_set(entry["images"], entry["labels"], t)
        if cfg.subsample is not None:
            if cfg.subsample > len(s):
                raise ValueError(f"subsample {cfg.subsample} exceeds task {t} size {len(s)}")
            s = s.head(cfg.subsample)
        sets.append(s)
    return sets
