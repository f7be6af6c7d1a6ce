"""Patchification, random masking, and the masked-reconstruction objective.

Only normalized-pixel reconstruction targets are implemented; discrete-token,
HOG, deep-feature, and frequency targets are out of scope for this package.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
import torch

from .core import ContractViolation, Image, RandomSource

NORM_EPS = 1e-6


@dataclass(frozen=True)
class PatchGrid:
    """An image cut into D flattened patches in row-major grid order."""

    patches: np.ndarray
    grid_rows: int
    grid_cols: int
    patch_size: int

    def __post_init__(self):
        d = self.grid_rows * self.grid_cols
        if self.patches.shape[0] != d:
            raise ContractViolation(
                f"patch count {self.patches.shape[0]} != grid {self.grid_rows}x{self.grid_cols}"
            )

    @property
    def num_patches(self) -> int:
        return self.patches.shape[0]


@dataclass(frozen=True)
class MaskPlan:
    """Which patch indices are hidden from the encoder."""

    masked_indices: np.ndarray
    mask_ratio: float
    num_patches: int

    def __post_init__(self):
        idx = np.asarray(self.masked_indices)
        if idx.size and (idx.min() < 0 or idx.max() >= self.num_patches):
            raise ContractViolation("masked index out of range")
        if len(np.unique(idx)) != len(idx):
            raise ContractViolation("masked indices must be unique")
        object.__setattr__(self, "masked_indices", np.sort(idx))

    @property
    def visible_indices(self) -> np.ndarray:
        mask = np.ones(self.num_patches, dtype=bool)
        mask[self.masked_indices] = False
        return np.nonzero(mask)[0]

    def bool_mask(self) -> np.ndarray:
        mask = np.zeros(self.num_patches, dtype=bool)
        mask[self.masked_indices] = True
        return mask


def mask_count(num_patches: int, mask_ratio: float) -> int:
    """Number of masked patches: mask_ratio * D rounded half away from zero."""
    return int(np.floor(mask_ratio * num_patches + 0.5))


def patchify(img: Union[Image, np.ndarray], patch_size: int) -> PatchGrid:
    """Cut an H x W x C image into flattened P*P*C patches, row-major."""
    arr = img.data if isinstance(img, Image) else np.asarray(img)
    if arr.ndim != 3:
        raise ContractViolation(f"expected H x W x C array, got shape {arr.shape}")
    h, w, c = arr.shape
    p = patch_size
    if h % p or w % p:
        raise ContractViolation(f"image {h}x{w} not divisible by patch size {p}")
    rows, cols = h // p, w // p
    patches = arr.reshape(rows, p, cols, p, c).transpose(0, 2, 1, 3, 4).reshape(rows * cols, p * p * c)
    return PatchGrid(patches=patches, grid_rows=rows, grid_cols=cols, patch_size=p)


def unpatchify(grid: PatchGrid, channels: int) -> np.ndarray:
    """Invert :func:`patchify` exactly."""
    p, rows, cols = grid.patch_size, grid.grid_rows, grid.grid_cols
    return (
        grid.patches.reshape(rows, cols, p, p, channels)
        .transpose(0, 2, 1, 3, 4)
        .reshape(rows * p, cols * p, channels)
    )


def patchify_batch(images: np.ndarray, patch_size: int) -> np.ndarray:
    """Vectorized patchify for a stack of images: (B,H,W,C) -> (B,D,P*P*C)."""
    b, h, w, c = images.shape
    p = patch_size
    if h % p or w % p:
        raise ContractViolation(f"image {h}x{w} not divisible by patch size {p}")
    rows, cols = h // p, w // p
    return (
        images.reshape(b, rows, p, cols, p, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(b, rows * cols, p * p * c)
    )


def sample_mask(num_patches: int, mask_ratio: float, rng: RandomSource) -> MaskPlan:
    """Uniformly random subset of patches to mask, without replacement."""
    if not 0.0 < mask_ratio < 1.0:
        raise ContractViolation(f"mask_ratio must lie in (0, 1), got {mask_ratio}")
    if num_patches < 2:
        raise ContractViolation(f"need at least 2 patches, got {num_patches}")
    count = mask_count(num_patches, mask_ratio)
    if count < 1 or count >= num_patches:
        raise ContractViolation(
            f"mask_ratio {mask_ratio} on {num_patches} patches leaves no masked or no visible patch"
        )
    idx = rng.permutation(num_patches)[:count]
    return MaskPlan(masked_indices=idx, mask_ratio=mask_ratio, num_patches=num_patches)


def normalize_patches(patches: torch.Tensor) -> torch.Tensor:
    """Standardize each patch vector to zero mean, unit variance."""
    mean = patches.mean(dim=-1, keepdim=True)
    var = patches.var(dim=-1, keepdim=True, unbiased=False)
    return (patches - mean) / torch.sqrt(var + NORM_EPS)


def _as_patch_tensor(x) -> torch.Tensor:
    if isinstance(x, PatchGrid):
        x = x.patches
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x))


def reconstruction_loss(
    pred,
    target,
    plan: Union[MaskPlan, Sequence[MaskPlan]],
    normalize_targets: bool = True,
    masked_only: bool = True,
) -> torch.Tensor:
    """Mean squared error between predicted and true patches.

    By default the mean runs over masked patches only, so the loss is
    invariant to whatever the model emits at visible positions. Targets are
    optionally standardized per patch before comparison. Accepts single
    (D, L) grids or batches (B, D, L); differentiable when given tensors.
    """
    pred_t = _as_patch_tensor(pred)
    target_t = _as_patch_tensor(target).to(pred_t.dtype)
    if pred_t.shape != target_t.shape:
        raise ContractViolation(f"shape mismatch: pred {tuple(pred_t.shape)} vs target {tuple(target_t.shape)}")

    squeeze = pred_t.dim() == 2
    if squeeze:
        pred_t, target_t = pred_t.unsqueeze(0), target_t.unsqueeze(0)
        plans = [plan]
    else:
        plans = list(plan) if not isinstance(plan, MaskPlan) else [plan] * pred_t.shape[0]
    if len(plans) != pred_t.shape[0]:
        raise ContractViolation(f"{len(plans)} mask plans for batch of {pred_t.shape[0]}")

    d = pred_t.shape[1]
    mask = np.zeros((len(plans), d), dtype=bool)
    for i, pl in enumerate(plans):
        if pl.num_patches != d:
            raise ContractViolation(f"plan covers {pl.num_patches} patches, grid has {d}")
        mask[i] = pl.bool_mask()
    if not masked_only:
        mask[:] = True

    if normalize_targets:
        target_t = normalize_patches(target_t)
    sq = (pred_t - target_t) ** 2
    mask_t = torch.from_numpy(mask).to(sq.device)
    return sq[mask_t].mean()
