"""Shared domain types, label algebra, and the deterministic random source.

Everything downstream (masking, mixing, losses, trainer) builds on the types
here. All types are immutable values after construction and all operations are
pure functions, so they are safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

LABEL_ATOL = 1e-6


class ContractViolation(ValueError):
    """A caller broke a documented precondition."""


class ValidationError(ValueError):
    """Input data failed validation against a type invariant."""


class NumericFault(RuntimeError):
    """A numeric quantity became non-finite or degenerate mid-computation."""


class ConfigError(ValueError):
    """A configuration value is inconsistent with the requested operation."""


class NoPositivesError(RuntimeError):
    """Every anchor in the batch lacked a positive candidate.

    The supervised contrastive loss is undefined in this case; callers should
    fall back to sibling-view (self-supervised) pairing.
    """


class RandomSource:
    """Deterministic, splittable random stream.

    Wraps a PCG64 generator seeded through :class:`numpy.random.SeedSequence`,
    so identical seeds produce identical draw sequences across runs and
    platforms. Every stochastic operation in this package takes an explicit
    RandomSource; there is no global randomness anywhere.

    ``split()`` derives an independent child stream; the n-th child of a given
    source is itself deterministic, which lets the trainer hand disjoint
    streams to data workers without coupling results to worker count.
    """

    def __init__(self, seed: int, _sequence: Optional[np.random.SeedSequence] = None):
        if not 0 <= int(seed) < 2**64:
            raise ContractViolation(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self._sequence = _sequence if _sequence is not None else np.random.SeedSequence(self.seed)
        self._generator = np.random.Generator(np.random.PCG64(self._sequence))

    def split(self) -> "RandomSource":
        """Derive the next independent child stream."""
        child = self._sequence.spawn(1)[0]
        return RandomSource(self.seed, _sequence=child)

    # -- draws ------------------------------------------------------------
    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._generator.uniform(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        return self._generator.normal(loc, scale, size)

    def truncated_normal(self, scale: float, size, clip: float = 2.0) -> np.ndarray:
        """Normal draws with resampling outside ``clip`` standard deviations."""
        out = self._generator.normal(0.0, 1.0, size)
        bad = np.abs(out) > clip
        while bad.any():
            out[bad] = self._generator.normal(0.0, 1.0, int(bad.sum()))
            bad = np.abs(out) > clip
        return (out * scale).astype(np.float64)

    def beta(self, a: float, b: float, size=None):
        return self._generator.beta(a, b, size)

    def integers(self, low: int, high: int, size=None):
        return self._generator.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(n)

    def choice(self, n: int, size: int, replace: bool = True, p=None) -> np.ndarray:
        return self._generator.choice(n, size=size, replace=replace, p=p)

    def __repr__(self) -> str:
        return f"RandomSource(seed={self.seed})"


@dataclass(frozen=True)
class Image:
    """An image as a channels-last float array with values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValidationError(f"image must be H x W x C, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValidationError("image contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValidationError(
                f"image values must lie in [0, 1], got range [{arr.min():.4g}, {arr.max():.4g}]"
            )
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class SoftLabel:
    """A probability vector over the K classes (one-hot or mixed)."""

    probs: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.probs, dtype=np.float64)
        if arr.ndim != 1:
            raise ValidationError(f"label must be a vector, got shape {arr.shape}")
        object.__setattr__(self, "probs", arr)

    def __len__(self) -> int:
        return len(self.probs)

    @property
    def is_one_hot(self) -> bool:
        return np.count_nonzero(self.probs == 1.0) == 1 and np.count_nonzero(self.probs) == 1

    @property
    def dominant_class(self) -> int:
        return int(np.argmax(self.probs))

    @staticmethod
    def one_hot(cls: int, num_classes: int) -> "SoftLabel":
        if not 0 <= cls < num_classes:
            raise ContractViolation(f"class {cls} out of range for {num_classes} classes")
        v = np.zeros(num_classes)
        v[cls] = 1.0
        return SoftLabel(v)


def validate_soft_label(v: Sequence[float]) -> SoftLabel:
    """Check simplex membership and wrap ``v`` as a SoftLabel.

    Rejects any negative entry (naming its index) and any vector whose sum
    deviates from 1 by more than 1e-6 (naming the sum).
    """
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ValidationError(f"label must be a vector, got shape {arr.shape}")
    neg = np.nonzero(arr < 0)[0]
    if neg.size:
        raise ValidationError(f"label entry {neg[0]} is negative ({arr[neg[0]]:.6g})")
    total = float(arr.sum())
    if abs(total - 1.0) > LABEL_ATOL:
        raise ValidationError(f"label entries sum to {total:.6g}, expected 1")
    return SoftLabel(arr)


def label_distance(a: SoftLabel, b: SoftLabel) -> float:
    """Total-variation distance between two soft labels.

    Defined as (1/2) * sum_k |a_k - b_k|, which lies in [0, 1], is symmetric,
    vanishes exactly when a == b, and for a one-hot ``b`` on class c reduces
    to 1 - a_c (one minus the weight the other label puts on c).
    """
    pa, pb = a.probs, b.probs
    if pa.shape != pb.shape:
        raise ContractViolation(f"label length mismatch: {pa.shape[0]} vs {pb.shape[0]}")
    return 0.5 * float(np.abs(pa - pb).sum())


def label_distance_matrix(labels: np.ndarray) -> np.ndarray:
    """Pairwise total-variation distances for a stack of label rows."""
    diffs = np.abs(labels[:, None, :] - labels[None, :, :])
    return 0.5 * diffs.sum(axis=2)


@dataclass(frozen=True)
class LabeledSample:
    """An image together with its (possibly soft) label."""

    image: Image
    label: SoftLabel
    source_id: str


@dataclass(frozen=True)
class ViewProvenance:
    """How one element of a multiview batch was derived.

    ``view_of`` indexes the input batch; a mixed element additionally records
    its partner element, the effective mix coefficient, and (for cutmix) the
    pasted box as (row0, col0, row1, col1) exclusive bounds.
    """

    view_of: int
    mix_partner: Optional[int] = None
    mix_coefficient: Optional[float] = None
    mix_mode: Optional[str] = None
    cut_box: Optional[tuple[int, int, int, int]] = None

    def __post_init__(self):
        if (self.mix_partner is None) != (self.mix_coefficient is None):
            raise ValidationError("mix_partner and mix_coefficient must be set together")


@dataclass(frozen=True)
class MultiviewBatch:
    """The 2B augmented (and optionally mixed) samples derived from B inputs.

    Images and labels are stored as stacked arrays for efficiency;
    ``unmixed_labels`` keeps the pre-mix one-hot labels so mixed labels can be
    reconstructed from provenance.
    """

    images: np.ndarray
    labels: np.ndarray
    provenance: tuple[ViewProvenance, ...]
    unmixed_labels: np.ndarray
    source_ids: tuple[str, ...] = field(default=())

    def __post_init__(self):
        n = self.images.shape[0]
        if n % 2 != 0:
            raise ValidationError(f"multiview batch must hold 2B elements, got {n}")
        if self.labels.shape[0] != n or len(self.provenance) != n:
            raise ValidationError("images, labels and provenance lengths disagree")
        for i, prov in enumerate(self.provenance):
            if prov.mix_partner is None:
                expected = self.unmixed_labels[i]
            else:
                lam = prov.mix_coefficient
                expected = lam * self.unmixed_labels[i] + (1 - lam) * self.unmixed_labels[prov.mix_partner]
            if np.abs(self.labels[i] - expected).max() > LABEL_ATOL:
                raise ValidationError(f"element {i}: stored label disagrees with provenance")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def is_mixed(self) -> bool:
        return any(p.mix_partner is not None for p in self.provenance)

    @property
    def view_of(self) -> np.ndarray:
        return np.array([p.view_of for p in self.provenance])

    def sample(self, i: int) -> LabeledSample:
        sid = self.source_ids[i] if self.source_ids else str(i)
        return LabeledSample(Image(self.images[i]), SoftLabel(self.labels[i]), sid)

    def __iter__(self) -> Iterator[LabeledSample]:
        return (self.sample(i) for i in range(len(self)))
