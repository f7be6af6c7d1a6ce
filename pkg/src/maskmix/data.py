"""Dataset ingestion, synthetic desk-scale data, and embedding export.

Real expression corpora are license-encumbered, so the repo ships only the
manifest adapters (CSV of ``path,label`` rows, optional ``classes.txt``) and a
procedural generator whose class signatures are oriented gratings plus
class-positioned blobs. A ``difficulty`` knob blends the signature with a
smooth noise field: 0 is linearly separable from raw pixels, 1 is pure noise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage

from .backbone import Checkpoint, Network, load_state, encoder_config_from_dict
from .core import ContractViolation, Image, LabeledSample, RandomSource, SoftLabel

MANIFEST_HEADER = ["path", "label"]
CLASSES_FILENAME = "classes.txt"


class IngestionError(ValueError):
    """A manifest row or its referenced image failed validation."""


@dataclass(frozen=True)
class DatasetManifest:
    """A validated list of (relative path, class index) entries."""

    root: Path
    split: str
    entries: tuple[tuple[str, int], ...]
    class_names: tuple[str, ...]
    duplicate_count: int = 0

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the procedural dataset generator."""

    num_classes: int = 7
    samples_per_class: int = 100
    image_size: int = 32
    signature_seed: int = 0
    difficulty: float = 0.5
    train_fraction: float = 0.8

    def __post_init__(self):
        if self.num_classes < 2:
            raise ContractViolation("need at least 2 classes")
        if not 0.0 <= self.difficulty <= 1.0:
            raise ContractViolation(f"difficulty must lie in [0, 1], got {self.difficulty}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ContractViolation(f"train_fraction must lie in (0, 1), got {self.train_fraction}")


@dataclass(frozen=True)
class LoadedDataset:
    """Decoded images and integer labels, ready for batching."""

    images: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...]
    source_ids: tuple[str, ...] = field(default=())

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def sample(self, i: int) -> LabeledSample:
        sid = self.source_ids[i] if self.source_ids else str(i)
        return LabeledSample(
            image=Image(self.images[i]),
            label=SoftLabel.one_hot(int(self.labels[i]), self.num_classes),
            source_id=sid,
        )

    def take(self, indices) -> list[LabeledSample]:
        return [self.sample(int(i)) for i in indices]


# -- ingestion ----------------------------------------------------------------


def ingest(manifest_path, split: str | None = None) -> DatasetManifest:
    """Validate a ``path,label`` CSV manifest relative to its own directory.

    Class names come from an optional ``classes.txt`` beside the manifest
    (one name per line); without one, the class count is the largest label
    plus one. Entries are sorted lexicographically by path so downstream runs
    do not depend on filesystem enumeration order. Duplicate paths are legal
    and counted.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise IngestionError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    if split is None:
        split = manifest_path.stem if manifest_path.stem in ("train", "test") else "train"

    class_names: tuple[str, ...] | None = None
    classes_file = root / CLASSES_FILENAME
    if classes_file.is_file():
        names = [line.strip() for line in classes_file.read_text().splitlines() if line.strip()]
        class_names = tuple(names)

    rows = []
    with open(manifest_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise IngestionError(f"{manifest_path}: expected header 'path,label', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise IngestionError(f"{manifest_path}:{lineno}: expected 2 columns, got {len(row)}")
            rel, label_text = row
            try:
                label = int(label_text)
            except ValueError:
                raise IngestionError(f"{manifest_path}:{lineno}: label {label_text!r} is not an integer")
            if label < 0:
                raise IngestionError(f"{manifest_path}:{lineno}: label {label} is negative")
            if class_names is not None and label >= len(class_names):
                raise IngestionError(
                    f"{manifest_path}:{lineno}: label {label} out of range for {len(class_names)} classes"
                )
            full = root / rel
            if not full.is_file():
                raise IngestionError(f"{manifest_path}:{lineno}: missing file {rel}")
            try:
                with PILImage.open(full) as img:
                    img.verify()
            except Exception as exc:
                raise IngestionError(f"{manifest_path}:{lineno}: unreadable image {rel}: {exc}")
            rows.append((rel, label))

    if not rows:
        raise IngestionError(f"{manifest_path}: no entries")
    if class_names is None:
        k = max(label for _, label in rows) + 1
        class_names = tuple(f"class_{i}" for i in range(k))
    duplicates = len(rows) - len({rel for rel, _ in rows})
    rows.sort(key=lambda entry: entry[0])
    return DatasetManifest(
        root=root,
        split=split,
        entries=tuple(rows),
        class_names=class_names,
        duplicate_count=duplicates,
    )


def _decode(path: Path, image_size: int, channels: int) -> np.ndarray:
    """Decode to float [0,1], aspect-preserving resize, center crop."""
    with PILImage.open(path) as img:
        img = img.convert("L" if channels == 1 else "RGB")
        w, h = img.size
        if (w, h) != (image_size, image_size):
            scale = image_size / min(w, h)
            img = img.resize((max(round(w * scale), image_size), max(round(h * scale), image_size)),
                             PILImage.BILINEAR)
            w, h = img.size
            left = (w - image_size) // 2
            top = (h - image_size) // 2
            img = img.crop((left, top, left + image_size, top + image_size))
        arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def load_dataset(manifest: DatasetManifest, image_size: int, channels: int = 1) -> LoadedDataset:
    """Decode every manifest entry into a stacked in-memory dataset."""
    images = np.empty((len(manifest), image_size, image_size, channels), dtype=np.float32)
    labels = np.empty(len(manifest), dtype=np.int64)
    sids = []
    for i, (rel, label) in enumerate(manifest.entries):
        images[i] = _decode(manifest.root / rel, image_size, channels)
        labels[i] = label
        sids.append(rel)
    return LoadedDataset(
        images=images, labels=labels, class_names=manifest.class_names, source_ids=tuple(sids)
    )


# -- synthetic generation -------------------------------------------------------


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    coords = np.linspace(-1.0, 1.0, size)
    return np.meshgrid(coords, coords, indexing="ij")


def _smooth_noise(size: int, rng: RandomSource, cells: int = 8) -> np.ndarray:
    """Low-frequency random field in [0, 1] from a coarse bilinear grid."""
    coarse = rng.uniform(size=(cells, cells))
    ys = np.linspace(0, cells - 1, size)
    y0 = np.floor(ys).astype(int)
    y1 = np.minimum(y0 + 1, cells - 1)
    wy = ys - y0
    rows = coarse[y0] * (1 - wy)[:, None] + coarse[y1] * wy[:, None]
    cols = rows[:, y0] * (1 - wy)[None, :] + rows[:, y1] * wy[None, :]
    return cols


def _grating(size: int, rng: RandomSource, lo: float = 3.0, hi: float = 10.0) -> np.ndarray:
    yy, xx = _grid(size)
    angle = rng.uniform(0, np.pi)
    freq = rng.uniform(lo, hi)
    phase = rng.uniform(0, 2 * np.pi)
    return np.sin(2 * np.pi * freq * (xx * np.cos(angle) + yy * np.sin(angle)) + phase)


def _signature(size: int, k: int, num_classes: int, rng: RandomSource, difficulty: float) -> np.ndarray:
    """Class-k template: a bright blob at the k-th position on the vertical axis.

    The class cue is invariant to horizontal flips (so the standard
    augmentation cannot alias classes); a random-orientation grating supplies
    class-irrelevant texture that the masked pre-training stage can learn.
    Position jitter grows with difficulty but stays below half the
    inter-class spacing, so classes remain Bayes-separable for difficulty < 1.
    """
    yy, xx = _grid(size)
    grating = _grating(size, rng)
    spacing = 1.3 / (num_classes - 1)
    jitter = (0.02 + 0.9 * difficulty) * spacing
    cy = -0.65 + 1.3 * k / (num_classes - 1) + rng.uniform(-jitter, jitter)
    cx = rng.uniform(-0.06, 0.06)
    blob = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.17**2)))
    return np.clip(0.3 + 0.14 * grating + 0.55 * blob, 0.0, 1.0)


def _noise_field(size: int, rng: RandomSource) -> np.ndarray:
    """Structured clutter: two smooth octaves, a grating, blob distractors."""
    yy, xx = _grid(size)
    field = 0.45 * _smooth_noise(size, rng) + 0.2 * _smooth_noise(size, rng, cells=16)
    field = field + 0.12 * (_grating(size, rng) * 0.5 + 0.5)
    for _ in range(2):
        cy, cx = rng.uniform(-0.85, 0.85, 2)
        sigma = rng.uniform(0.13, 0.22)
        field = field + rng.uniform(0.3, 0.55) * np.exp(
            -(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        )
    return np.clip(field, 0.0, 1.0)


def _texture(size: int, rng: RandomSource) -> np.ndarray:
    """A general image for the pre-training corpus: gratings, blobs, noise."""
    yy, xx = _grid(size)
    img = 0.4 + 0.18 * _grating(size, rng, lo=2.5, hi=11.0)
    img = img + 0.1 * _grating(size, rng, lo=6.0, hi=14.0)
    for _ in range(int(rng.integers(0, 3))):
        cy, cx = rng.uniform(-0.8, 0.8, 2)
        sigma = rng.uniform(0.12, 0.35)
        img = img + rng.uniform(0.2, 0.5) * np.exp(
            -(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        )
    noise_w = rng.uniform(0.15, 0.45)
    octaves = 0.7 * _smooth_noise(size, rng) + 0.3 * _smooth_noise(size, rng, cells=16)
    img = (1 - noise_w) * img + noise_w * octaves
    return np.clip(img, 0.0, 1.0)


def _write_png(path: Path, img: np.ndarray) -> None:
    quantized = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(quantized, mode="L").save(path, format="PNG")


def _write_manifest(path: Path, entries: list[tuple[str, int]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        writer.writerows(entries)


def generate_synthetic(
    spec: SyntheticSpec,
    out_dir,
    rng: RandomSource,
) -> tuple[DatasetManifest, DatasetManifest]:
    """Write a labeled synthetic dataset to disk and return train/test manifests.

    Every sample is (1 - difficulty) * class signature + difficulty * smooth
    noise. The split is stratified per class; generation is bit-deterministic
    for a fixed spec and random source.
    """
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)

    train_entries, test_entries = [], []
    n_train = int(round(spec.samples_per_class * spec.train_fraction))
    for k in range(spec.num_classes):
        for j in range(spec.samples_per_class):
            sig = _signature(spec.image_size, k, spec.num_classes, rng, spec.difficulty)
            noise = _noise_field(spec.image_size, rng)
            img = (1.0 - spec.difficulty) * sig + spec.difficulty * noise
            rel = f"images/c{k}_{j:04d}.png"
            _write_png(out_dir / rel, img)
            (train_entries if j < n_train else test_entries).append((rel, k))

    (out_dir / CLASSES_FILENAME).write_text(
        "".join(f"class_{k}\n" for k in range(spec.num_classes))
    )
    _write_manifest(out_dir / "train.csv", train_entries)
    _write_manifest(out_dir / "test.csv", test_entries)
    return ingest(out_dir / "train.csv", split="train"), ingest(out_dir / "test.csv", split="test")


def generate_corpus(count: int, image_size: int, out_dir, rng: RandomSource) -> DatasetManifest:
    """Write an unlabeled general-image corpus (labels fixed at 0)."""
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for j in range(count):
        rel = f"images/g{j:05d}.png"
        _write_png(out_dir / rel, _texture(image_size, rng))
        entries.append((rel, 0))
    (out_dir / CLASSES_FILENAME).write_text("unlabeled\n")
    _write_manifest(out_dir / "corpus.csv", entries)
    return ingest(out_dir / "corpus.csv", split="train")


# -- simple separability probe ---------------------------------------------------


def linear_probe_accuracy(train: LoadedDataset, test: LoadedDataset, ridge: float = 1e-3) -> float:
    """Least-squares linear probe on raw pixels; the separability oracle."""
    def flatten(ds: LoadedDataset) -> np.ndarray:
        x = ds.images.reshape(len(ds.labels), -1).astype(np.float64)
        return np.hstack([x, np.ones((len(x), 1))])

    x_train = flatten(train)
    y = np.eye(train.num_classes)[train.labels]
    gram = x_train.T @ x_train + ridge * np.eye(x_train.shape[1])
    weights = np.linalg.solve(gram, x_train.T @ y)
    pred = (flatten(test) @ weights).argmax(axis=1)
    return float((pred == test.labels).mean())


# -- embedding export -------------------------------------------------------------


def export_embeddings(dataset: LoadedDataset, checkpoint: Checkpoint, out_path) -> int:
    """Write one CSV row per sample: source_id, class, then the pooled r-vector."""
    meta = checkpoint.metadata
    model = Network(
        encoder_config_from_dict(meta["encoder"]),
        num_classes=meta.get("num_classes"),
        projection_dim=meta.get("projection_dim"),
        projection_variant=meta.get("projection_head", "dense"),
        pool_mode=meta.get("classification_head", "gap"),
    )
    load_state(model, checkpoint.tensors)
    model.eval()

    dim = model.cfg.embed_dim
    rows_written = 0
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["source_id", "class"] + [f"r{i}" for i in range(dim)])
        with torch.inference_mode():
            for b0 in range(0, len(dataset.labels), 256):
                images = torch.from_numpy(dataset.images[b0 : b0 + 256])
                _, reps = model.represent(images)
                reps = reps.numpy()
                for i, row in enumerate(reps):
                    idx = b0 + i
                    sid = dataset.source_ids[idx] if dataset.source_ids else str(idx)
                    writer.writerow([sid, int(dataset.labels[idx])] + [repr(float(v)) for v in row])
                    rows_written += 1
    return rows_written
