"""Training objectives: soft-target cross-entropy and the contrastive family.

The three contrastive losses differ only in how positives are chosen —
sibling view (SSCL), same class (SCL), or label distance within a threshold
after mixing (MSCL) — so they share one temperature-scaled core. Similarities
are cosine (inputs are unit rows), divided by the temperature, and reduced
through a max-stabilized log-sum-exp over all non-self candidates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
import torch

from .backbone import ProjectionBatch
from .core import (
    ContractViolation,
    MultiviewBatch,
    NoPositivesError,
    NumericFault,
    SoftLabel,
)
from .mixing import PairMask


@dataclass(frozen=True)
class LossConfig:
    """Temperature, contrastive weight, and positive-selection threshold."""

    temperature: float = 0.07
    loss_weight: float = 0.1
    threshold: float = 0.5

    def __post_init__(self):
        if self.temperature <= 0:
            raise ContractViolation(f"temperature must be positive, got {self.temperature}")
        if self.loss_weight < 0:
            raise ContractViolation(f"loss_weight must be nonnegative, got {self.loss_weight}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ContractViolation(f"threshold must lie in [0, 1], got {self.threshold}")


def _as_tensor(x, name: str) -> torch.Tensor:
    if isinstance(x, ProjectionBatch):
        x = x.z
    if isinstance(x, torch.Tensor):
        t = x
    else:
        t = torch.as_tensor(np.asarray(x))
    if t.dim() != 2:
        raise ContractViolation(f"{name} must be 2-d, got shape {tuple(t.shape)}")
    return t


def _as_target_tensor(targets, like: torch.Tensor) -> torch.Tensor:
    if isinstance(targets, (list, tuple)) and targets and isinstance(targets[0], SoftLabel):
        targets = np.stack([t.probs for t in targets])
    t = targets if isinstance(targets, torch.Tensor) else torch.as_tensor(np.asarray(targets))
    return t.to(like.dtype)


def cross_entropy(logits: torch.Tensor, targets) -> torch.Tensor:
    """Mean soft-target cross-entropy: -(1/N) sum_i sum_k q_ik log p_ik.

    Reduces to the standard loss for one-hot targets; stabilized through
    log-softmax so huge logits cannot overflow.
    """
    logits = _as_tensor(logits, "logits")
    if not torch.isfinite(logits).all():
        raise NumericFault("cross_entropy received non-finite logits")
    q = _as_target_tensor(targets, logits)
    if q.shape != logits.shape:
        raise ContractViolation(f"targets {tuple(q.shape)} do not match logits {tuple(logits.shape)}")
    if logits.shape[1] < 2:
        raise ContractViolation("need at least 2 classes")
    return -(q * torch.log_softmax(logits, dim=1)).sum(dim=1).mean()


def contrastive_loss(
    z: torch.Tensor,
    positives: np.ndarray,
    temperature: float,
) -> tuple[torch.Tensor, int]:
    """Shared contrastive core over an explicit positive mask.

    For each anchor i with at least one positive, averages
    -log(exp(z_i.z_p / tau) / sum_{a != i} exp(z_i.z_a / tau)) over its
    positives; the result is the mean over contributing anchors. Anchors with
    no positives are skipped; the second return value counts them. When every
    anchor is skipped the loss is 0 (and the count is the batch size).
    """
    if temperature <= 0:
        raise ContractViolation(f"temperature must be positive, got {temperature}")
    z = _as_tensor(z, "z")
    n = z.shape[0]
    pos = np.asarray(positives, dtype=bool)
    if pos.shape != (n, n):
        raise ContractViolation(f"positive mask {pos.shape} does not match batch of {n}")
    if pos.diagonal().any():
        raise ContractViolation("an anchor cannot be its own positive")

    sim = (z @ z.T) / temperature
    eye = torch.eye(n, dtype=torch.bool, device=z.device)
    sim = sim.masked_fill(eye, float("-inf"))
    log_prob = sim - torch.logsumexp(sim, dim=1, keepdim=True)

    pos_t = torch.from_numpy(pos).to(z.device)
    counts = pos_t.sum(dim=1)
    contributing = counts > 0
    skipped = int(n - contributing.sum().item())
    if skipped == n:
        return z.sum() * 0.0, skipped
    per_anchor = -(log_prob.masked_fill(~pos_t, 0.0).sum(dim=1) / counts.clamp(min=1))
    return per_anchor[contributing].mean(), skipped


def _view_of_array(provenance) -> np.ndarray:
    if isinstance(provenance, MultiviewBatch):
        return provenance.view_of
    if hasattr(provenance, "__len__") and len(provenance) and hasattr(provenance[0], "view_of"):
        return np.array([p.view_of for p in provenance])
    return np.asarray(provenance)


def sibling_mask(view_of: np.ndarray) -> np.ndarray:
    """Positive mask pairing each element with its one sibling view."""
    same = view_of[:, None] == view_of[None, :]
    np.fill_diagonal(same, False)
    counts = same.sum(axis=1)
    if (counts != 1).any():
        bad = int(np.nonzero(counts != 1)[0][0])
        raise ContractViolation(
            f"element {bad} has {counts[bad]} sibling views; every element needs exactly one"
        )
    return same


def sscl_loss(z, provenance, temperature: float) -> torch.Tensor:
    """Self-supervised contrastive loss: the sibling view is the one positive."""
    loss, _ = contrastive_loss(z, sibling_mask(_view_of_array(provenance)), temperature)
    return loss


def class_mask(labels) -> np.ndarray:
    """Positive mask from one-hot labels: same class, excluding self."""
    if isinstance(labels, (list, tuple)) and labels and isinstance(labels[0], SoftLabel):
        labels = np.stack([l.probs for l in labels])
    arr = np.asarray(labels, dtype=np.float64)
    one_hot = (arr.max(axis=1) == 1.0) & (np.count_nonzero(arr, axis=1) == 1)
    if not one_hot.all():
        bad = int(np.nonzero(~one_hot)[0][0])
        raise ContractViolation(f"label {bad} is not one-hot; the class-supervised loss needs hard labels")
    cls = arr.argmax(axis=1)
    same = cls[:, None] == cls[None, :]
    np.fill_diagonal(same, False)
    return same


def scl_loss(z, labels, temperature: float) -> torch.Tensor:
    """Class-supervised contrastive loss: every same-class candidate is positive.

    Raises NoPositivesError when every class in the batch is a singleton, in
    which case callers should fall back to sibling-view pairing.
    """
    mask = class_mask(labels)
    loss, skipped = contrastive_loss(z, mask, temperature)
    if skipped == mask.shape[0]:
        raise NoPositivesError(
            "every anchor lacks a same-class candidate; fall back to sibling-view (SSCL) pairing"
        )
    return loss


def mscl_loss(z, mask: Union[PairMask, np.ndarray], temperature: float) -> torch.Tensor:
    """Mix-supervised contrastive loss over a threshold-derived pair mask."""
    pos = mask.positives() if isinstance(mask, PairMask) else np.asarray(mask, dtype=bool)
    loss, _ = contrastive_loss(z, pos, temperature)
    return loss


@dataclass
class FinetuneLossParts:
    """Total fine-tuning objective and its logged components."""

    total: torch.Tensor
    cross_entropy: torch.Tensor
    contrastive: torch.Tensor
    skipped_anchors: int


def total_finetune_loss(
    logits: torch.Tensor,
    targets,
    z,
    mask: Union[PairMask, np.ndarray, None],
    cfg: LossConfig,
) -> FinetuneLossParts:
    """Classification plus weighted contrastive loss: CE + w * MSCL.

    With weight 0 (or no mask) the contrastive branch is skipped entirely and
    the total is exactly the cross-entropy.
    """
    ce = cross_entropy(logits, targets)
    if cfg.loss_weight == 0.0 or mask is None:
        zero = ce.detach() * 0.0
        return FinetuneLossParts(total=ce, cross_entropy=ce, contrastive=zero, skipped_anchors=0)
    pos = mask.positives() if isinstance(mask, PairMask) else np.asarray(mask, dtype=bool)
    cl, skipped = contrastive_loss(z, pos, cfg.temperature)
    return FinetuneLossParts(
        total=ce + cfg.loss_weight * cl,
        cross_entropy=ce,
        contrastive=cl,
        skipped_anchors=skipped,
    )
