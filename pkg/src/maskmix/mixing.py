"""Two-view augmentation, mixup/cutmix blending, and positive-pair selection.

A batch of B labeled samples becomes a multiview batch of 2B augmented
views; mixing then replaces each element by a convex image/label blend with a
random non-self partner. Positives are whichever candidates end up within a
label-distance threshold of the anchor.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Optional, Sequence

import numpy as np

from .core import (
    ContractViolation,
    Image,
    LabeledSample,
    MultiviewBatch,
    RandomSource,
    SoftLabel,
    ViewProvenance,
    label_distance_matrix,
)


@dataclass(frozen=True)
class MixPolicy:
    """Beta-coefficient and mode settings for image/label mixing."""

    alpha: float = 2.0
    beta: float = 2.0
    mode: str = "random_choice"
    enabled: bool = True

    MODES = ("mixup", "cutmix", "random_choice")

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ContractViolation(f"Beta parameters must be positive, got {self.alpha}, {self.beta}")
        if self.mode not in self.MODES:
            raise ContractViolation(f"mode must be one of {self.MODES}, got {self.mode!r}")


class Relation(IntEnum):
    SELF = 0
    POSITIVE = 1
    NEGATIVE = 2


@dataclass(frozen=True)
class PairMask:
    """2B x 2B designation of each ordered pair as self/positive/negative."""

    relation: np.ndarray
    threshold: float

    def __post_init__(self):
        rel = np.asarray(self.relation)
        if rel.ndim != 2 or rel.shape[0] != rel.shape[1]:
            raise ContractViolation(f"relation must be square, got shape {rel.shape}")
        if not (np.diag(rel) == Relation.SELF).all():
            raise ContractViolation("diagonal entries must be SELF")
        object.__setattr__(self, "relation", rel)

    def positives(self) -> np.ndarray:
        return self.relation == Relation.POSITIVE

    def __len__(self) -> int:
        return self.relation.shape[0]


# -- augmentation -------------------------------------------------------------


def _random_resized_crops(
    images: np.ndarray,
    rng: RandomSource,
    scale: tuple[float, float],
    hflip_prob: float,
) -> np.ndarray:
    """Vectorized random-resized-crop plus horizontal flip for a view stack.

    Crop boxes are derived from an area fraction in ``scale`` and an aspect
    ratio in [3/4, 4/3], clipped to the image bounds, then resampled back to
    full size bilinearly.
    """
    n, h, w, _ = images.shape
    area = rng.uniform(scale[0], scale[1], n)
    aspect = np.exp(rng.uniform(np.log(3 / 4), np.log(4 / 3), n))
    ch = np.clip(np.round(h * np.sqrt(area / aspect)).astype(int), 1, h)
    cw = np.clip(np.round(w * np.sqrt(area * aspect)).astype(int), 1, w)
    y0 = np.floor(rng.uniform(0.0, 1.0, n) * (h - ch + 1)).astype(int)
    x0 = np.floor(rng.uniform(0.0, 1.0, n) * (w - cw + 1)).astype(int)
    flip = rng.uniform(0.0, 1.0, n) < hflip_prob

    ys = y0[:, None] + np.linspace(0.0, 1.0, h)[None, :] * (ch[:, None] - 1)
    xs = x0[:, None] + np.linspace(0.0, 1.0, w)[None, :] * (cw[:, None] - 1)
    xs[flip] = xs[flip][:, ::-1]
    y0i = np.floor(ys).astype(int)
    x0i = np.floor(xs).astype(int)
    y1i = np.minimum(y0i + 1, h - 1)
    x1i = np.minimum(x0i + 1, w - 1)
    wy = (ys - y0i).astype(np.float32)[:, :, None, None]
    wx = (xs - x0i).astype(np.float32)[:, None, :, None]

    bi = np.arange(n)[:, None, None]
    top = images[bi, y0i[:, :, None], x0i[:, None, :]] * (1 - wx) + images[
        bi, y0i[:, :, None], x1i[:, None, :]
    ] * wx
    bottom = images[bi, y1i[:, :, None], x0i[:, None, :]] * (1 - wx) + images[
        bi, y1i[:, :, None], x1i[:, None, :]
    ] * wx
    return top * (1 - wy) + bottom * wy


def _color_jitter(images: np.ndarray, rng: RandomSource, strength: float) -> np.ndarray:
    """Per-view brightness, contrast, and saturation scaling (multi-channel)."""
    n = images.shape[0]
    lo, hi = 1 - strength, 1 + strength
    out = images * rng.uniform(lo, hi, n)[:, None, None, None]
    mean = out.mean(axis=(1, 2, 3), keepdims=True)
    out = mean + (out - mean) * rng.uniform(lo, hi, n)[:, None, None, None]
    gray = out.mean(axis=3, keepdims=True)
    out = gray + (out - gray) * rng.uniform(lo, hi, n)[:, None, None, None]
    return out


def augment_two_views(
    batch: Sequence[LabeledSample],
    rng: RandomSource,
    enabled: bool = True,
    crop_scale: tuple[float, float] = (0.67, 1.0),
    hflip_prob: float = 0.5,
    jitter_strength: float = 0.2,
) -> MultiviewBatch:
    """Produce two independently augmented views per input, labels unchanged.

    Views of input i land at positions 2i and 2i+1. With augmentation
    disabled the views are identical copies of the input.
    """
    if len(batch) < 2:
        raise ContractViolation(f"contrastive batches need B >= 2 inputs, got {len(batch)}")
    stacked = np.stack([np.asarray(s.image.data, dtype=np.float32) for s in batch])
    doubled = np.repeat(stacked, 2, axis=0)
    if enabled:
        views = _random_resized_crops(doubled, rng, crop_scale, hflip_prob)
        if doubled.shape[3] > 1 and jitter_strength > 0:
            views = _color_jitter(views, rng, jitter_strength)
        views = np.clip(views, 0.0, 1.0).astype(np.float32, copy=False)
    else:
        views = doubled
    labels_arr = np.repeat(np.stack([s.label.probs for s in batch]), 2, axis=0)
    prov = tuple(ViewProvenance(view_of=i // 2) for i in range(len(views)))
    sids = tuple(batch[i // 2].source_id for i in range(len(views)))
    return MultiviewBatch(
        images=np.ascontiguousarray(views),
        labels=labels_arr,
        provenance=prov,
        unmixed_labels=labels_arr.copy(),
        source_ids=sids,
    )


# -- mixing -------------------------------------------------------------------


def sample_mix_coefficient(policy: MixPolicy, rng: RandomSource) -> float:
    """Draw the blend coefficient from Beta(alpha, beta)."""
    return float(rng.beta(policy.alpha, policy.beta))


def _cutmix_box(h: int, w: int, lam: float, rng: RandomSource) -> tuple[int, int, int, int]:
    """A box covering a (1 - lam) area fraction, placed fully inside the image."""
    cut = np.sqrt(1.0 - lam)
    bh, bw = int(round(h * cut)), int(round(w * cut))
    if bh == 0 or bw == 0:
        return (0, 0, 0, 0)
    y0 = int(rng.integers(0, h - bh + 1))
    x0 = int(rng.integers(0, w - bw + 1))
    return (y0, x0, y0 + bh, x0 + bw)


def _mix_images(
    img_a: np.ndarray,
    img_b: np.ndarray,
    lam: float,
    mode: str,
    rng: RandomSource,
) -> tuple[np.ndarray, float, Optional[tuple[int, int, int, int]]]:
    """Blend two images; returns (mixed image, effective lambda, cutmix box)."""
    if img_a.shape != img_b.shape:
        raise ContractViolation(f"image shape mismatch: {img_a.shape} vs {img_b.shape}")
    if mode == "mixup":
        return lam * img_a + (1.0 - lam) * img_b, lam, None
    if mode == "cutmix":
        h, w = img_a.shape[:2]
        box = _cutmix_box(h, w, lam, rng)
        y0, x0, y1, x1 = box
        out = img_a.copy()
        out[y0:y1, x0:x1] = img_b[y0:y1, x0:x1]
        lam_eff = 1.0 - ((y1 - y0) * (x1 - x0)) / (h * w)
        return out, lam_eff, box if y1 > y0 else None
    raise ContractViolation(f"unknown mix mode {mode!r}")


@dataclass(frozen=True)
class MixOutcome:
    """What a single pair-mix actually did."""

    mix_coefficient: float
    mode: str
    cut_box: Optional[tuple[int, int, int, int]]


def mix_pair(
    a: LabeledSample,
    b: LabeledSample,
    lam: float,
    mode: str,
    rng: RandomSource,
) -> tuple[LabeledSample, MixOutcome]:
    """Mix two labeled samples; the label gets the image's effective weight."""
    if len(a.label) != len(b.label):
        raise ContractViolation(f"label length mismatch: {len(a.label)} vs {len(b.label)}")
    mixed_img, lam_eff, box = _mix_images(
        np.asarray(a.image.data), np.asarray(b.image.data), lam, mode, rng
    )
    mixed_label = lam_eff * a.label.probs + (1.0 - lam_eff) * b.label.probs
    sample = LabeledSample(
        image=Image(np.clip(mixed_img, 0.0, 1.0)),
        label=SoftLabel(mixed_label),
        source_id=f"{a.source_id}+{b.source_id}",
    )
    return sample, MixOutcome(mix_coefficient=lam_eff, mode=mode, cut_box=box)


def mix_multiview(batch: MultiviewBatch, policy: MixPolicy, rng: RandomSource) -> MultiviewBatch:
    """Replace every element by a blend with a random non-self partner.

    Each element i draws a fresh partner j != i and coefficient, and is mixed
    against the original (unmixed) batch content. Disabled policies return the
    input unchanged.
    """
    if not policy.enabled:
        return batch
    if batch.is_mixed:
        raise ContractViolation("batch is already mixed")
    n = len(batch)
    images = np.empty_like(batch.images)
    labels = np.empty_like(batch.labels)
    prov = []
    for i in range(n):
        j = int(rng.integers(0, n - 1))
        if j >= i:
            j += 1
        lam = sample_mix_coefficient(policy, rng)
        if policy.mode == "random_choice":
            mode = "mixup" if rng.uniform() < 0.5 else "cutmix"
        else:
            mode = policy.mode
        mixed, lam_eff, box = _mix_images(batch.images[i], batch.images[j], lam, mode, rng)
        images[i] = np.clip(mixed, 0.0, 1.0)
        labels[i] = lam_eff * batch.unmixed_labels[i] + (1.0 - lam_eff) * batch.unmixed_labels[j]
        prov.append(
            ViewProvenance(
                view_of=batch.provenance[i].view_of,
                mix_partner=j,
                mix_coefficient=lam_eff,
                mix_mode=mode,
                cut_box=box,
            )
        )
    return MultiviewBatch(
        images=images,
        labels=labels,
        provenance=tuple(prov),
        unmixed_labels=batch.unmixed_labels,
        source_ids=batch.source_ids,
    )


def build_pair_mask(batch: MultiviewBatch, threshold: float) -> PairMask:
    """Designate each ordered pair by thresholding the label distance.

    A candidate is positive for an anchor exactly when the total-variation
    distance between their (possibly mixed) labels is at most the threshold.
    With one-hot labels this reduces to same-class positives for any
    threshold below 1.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ContractViolation(f"threshold must lie in [0, 1], got {threshold}")
    dist = label_distance_matrix(batch.labels)
    relation = np.where(dist <= threshold, Relation.POSITIVE, Relation.NEGATIVE).astype(np.int8)
    np.fill_diagonal(relation, Relation.SELF)
    return PairMask(relation=relation, threshold=threshold)
