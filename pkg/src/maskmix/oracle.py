"""Independent reference implementations used to validate the fast paths.

Everything here is deliberately naive: plain Python loops over numpy arrays
in 64-bit precision, no vectorization beyond per-element arithmetic, and no
dependence on the modules being checked. Tolerances are 1e-6 relative for
values and 1e-4 for gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import ContractViolation, NumericFault

ORACLE_MAX_BATCH = 16
REL_ERR_FLOOR = 1e-8


def oracle_contrastive(
    z: np.ndarray,
    positives: Sequence[Sequence[int]],
    temperature: float,
) -> float:
    """Double-loop transcription of the contrastive objective.

    ``positives[i]`` lists the candidate indices counted as positive for
    anchor i; anchors with empty lists are skipped and the result is the mean
    over contributing anchors. Intended for batches of at most 16 elements.
    """
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[0]
    if n > ORACLE_MAX_BATCH:
        raise ContractViolation(f"oracle accepts at most {ORACLE_MAX_BATCH} elements, got {n}")
    if len(positives) != n:
        raise ContractViolation(f"{len(positives)} positive sets for {n} anchors")

    terms = []
    for i in range(n):
        pos = list(positives[i])
        if not pos:
            continue
        if i in pos:
            raise ContractViolation(f"anchor {i} listed as its own positive")
        sims = []
        for a in range(n):
            if a == i:
                continue
            sims.append((a, float(np.dot(z[i], z[a])) / temperature))
        peak = max(s for _, s in sims)
        denom = sum(math.exp(s - peak) for _, s in sims)
        inner = 0.0
        for p in pos:
            s_p = next(s for a, s in sims if a == p)
            inner += -math.log(math.exp(s_p - peak) / denom)
        terms.append(inner / len(pos))
    if not terms:
        return 0.0
    return sum(terms) / len(terms)


def oracle_cross_entropy(logits: np.ndarray, targets: np.ndarray) -> float:
    """Loop-computed soft-target cross-entropy with max-subtraction."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    total = 0.0
    for row, q in zip(logits, targets):
        peak = row.max()
        log_z = peak + math.log(sum(math.exp(v - peak) for v in row))
        total += sum(-q[k] * (row[k] - log_z) for k in range(len(row)))
    return total / len(logits)


def oracle_reconstruction(
    pred: np.ndarray,
    target: np.ndarray,
    masked: Sequence[int],
    normalize_targets: bool,
    eps: float = 1e-6,
) -> float:
    """Summation-loop mean squared error over the masked patches of one grid."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    total, count = 0.0, 0
    for d in masked:
        t = target[d]
        if normalize_targets:
            mu = t.mean()
            var = ((t - mu) ** 2).mean()
            t = (t - mu) / math.sqrt(var + eps)
        for a, b in zip(pred[d], t):
            total += (a - b) ** 2
            count += 1
    return total / count


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise |a - b| / max(|a|, |b|, 1e-8)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), REL_ERR_FLOOR)
    return np.abs(a - b) / scale


def finite_diff_grad(
    f: Callable[[np.ndarray], float],
    theta: np.ndarray,
    h: float = 1e-5,
) -> np.ndarray:
    """Central-difference gradient estimate, one coordinate at a time."""
    if h <= 0:
        raise ContractViolation(f"perturbation must be positive, got {h}")
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    for k in range(theta.size):
        bump = np.zeros_like(theta)
        bump.flat[k] = h
        hi = float(f(theta + bump))
        lo = float(f(theta - bump))
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise NumericFault(f"objective non-finite at coordinate {k}")
        grad.flat[k] = (hi - lo) / (2.0 * h)
    return grad


@dataclass(frozen=True)
class GradCheckReport:
    """Outcome of comparing an analytic gradient against finite differences."""

    name: str
    max_rel_err: float
    perturbation: float
    tolerance: float
    noise_floor: float = 1e-9

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def check_gradient(
    name: str,
    f: Callable[[np.ndarray], float],
    analytic_grad: np.ndarray,
    theta: np.ndarray,
    h: float = 1e-5,
    tolerance: float = 1e-4,
    noise_floor: float = 1e-9,
) -> GradCheckReport:
    """Build a report comparing ``analytic_grad`` to the central-difference
    estimate of f at theta.

    Central differences carry rounding noise of roughly eps * |f| / h
    (about 2e-11 for unit-scale objectives at h = 1e-5), so coordinates whose
    absolute disagreement sits below ``noise_floor`` are counted as matched:
    at that magnitude the estimator itself cannot distinguish right from
    wrong, while any genuinely broken gradient disagrees far above it.
    """
    numeric = finite_diff_grad(f, theta, h)
    analytic = np.asarray(analytic_grad, dtype=np.float64).ravel()
    err = relative_error(analytic, numeric.ravel())
    err[np.abs(analytic - numeric.ravel()) <= noise_floor] = 0.0
    return GradCheckReport(
        name=name,
        max_rel_err=float(err.max()),
        perturbation=h,
        tolerance=tolerance,
        noise_floor=noise_floor,
    )


# -- torch bridge ---------------------------------------------------------------
#
# The helpers below flatten model parameters so the black-box finite-difference
# checker above can drive any differentiable torch computation. The checker
# itself never inspects the graph; only the analytic side uses autograd.

import torch  # noqa: E402  (kept below the pure-numpy oracle core)


def flatten_tensors(tensors) -> np.ndarray:
    return np.concatenate([t.detach().cpu().numpy().astype(np.float64).ravel() for t in tensors])


def assign_flat(tensors, theta: np.ndarray) -> None:
    offset = 0
    with torch.no_grad():
        for t in tensors:
            n = t.numel()
            chunk = torch.from_numpy(np.asarray(theta[offset : offset + n], dtype=np.float64))
            t.copy_(chunk.view(t.shape).to(t.dtype))
            offset += n


def torch_gradcheck(
    name: str,
    make_loss: Callable[[], "torch.Tensor"],
    params,
    h: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Compare autograd gradients of ``make_loss`` w.r.t. ``params`` against
    central finite differences in the flattened parameter space."""
    params = list(params)
    theta0 = flatten_tensors(params)
    loss = make_loss()
    grads = torch.autograd.grad(loss, params, allow_unused=False)
    analytic = flatten_tensors(grads)

    def f(theta: np.ndarray) -> float:
        assign_flat(params, theta)
        with torch.no_grad():
            value = float(make_loss())
        return value

    try:
        report = check_gradient(name, f, analytic, theta0, h=h, tolerance=tolerance)
    finally:
        assign_flat(params, theta0)
    return report


def _micro_network(rng, num_classes: int = 3, with_decoder: bool = False):
    """The smallest network that still exercises every architectural path."""
    from .backbone import EncoderConfig, Network, init_parameters

    cfg = EncoderConfig(
        image_size=8,
        patch_size=4,
        channels=1,
        embed_dim=12,
        depth=1,
        num_heads=2,
        mlp_ratio=2.0,
        decoder_dim=8,
        decoder_depth=1,
        decoder_num_heads=2,
    )
    model = Network(
        cfg,
        num_classes=None if with_decoder else num_classes,
        projection_dim=None if with_decoder else 6,
        with_decoder=with_decoder,
    )
    init_parameters(model, rng, std=0.05)
    return model.double()


def _random_positive_mask(rng, n: int) -> np.ndarray:
    pos = rng.uniform(size=(n, n)) < 0.4
    pos = np.triu(pos, 1)
    pos = pos | pos.T
    if not pos.any():
        pos[0, 1] = pos[1, 0] = True
    return pos


def gradcheck_suite(
    points: int = 20,
    h: float = 1e-5,
    tolerance: float = 1e-4,
    seed: int = 0,
) -> list[GradCheckReport]:
    """Gradient checks for every differentiable objective, in 64-bit precision.

    Each named check runs at ``points`` random parameter points; the reported
    error is the worst over all points and coordinates.
    """
    from .core import RandomSource
    from .losses import cross_entropy, mscl_loss, total_finetune_loss, LossConfig
    from .masking import MaskPlan, reconstruction_loss, mask_count
    from .backbone import patchify_tensor

    rng = RandomSource(seed)
    reports = []

    def aggregate(name: str, run_once: Callable[[], GradCheckReport]) -> None:
        worst = 0.0
        for _ in range(points):
            worst = max(worst, run_once().max_rel_err)
        reports.append(GradCheckReport(name=name, max_rel_err=worst, perturbation=h, tolerance=tolerance))

    def ce_once() -> GradCheckReport:
        logits = torch.tensor(rng.normal(size=(6, 5)), requires_grad=True)
        raw = np.exp(rng.normal(size=(6, 5)))
        targets = torch.tensor(raw / raw.sum(axis=1, keepdims=True))
        return torch_gradcheck("cross_entropy", lambda: cross_entropy(logits, targets), [logits], h, tolerance)

    def mscl_once() -> GradCheckReport:
        z0 = rng.normal(size=(6, 8))
        z0 /= np.linalg.norm(z0, axis=1, keepdims=True)
        z = torch.tensor(z0, requires_grad=True)
        pos = _random_positive_mask(rng, 6)
        return torch_gradcheck("mscl_loss", lambda: mscl_loss(z, pos, 0.07), [z], h, tolerance)

    def recon_once() -> GradCheckReport:
        num_patches, patch_len = 8, 12
        pred = torch.tensor(rng.normal(size=(num_patches, patch_len)), requires_grad=True)
        target = torch.tensor(rng.uniform(size=(num_patches, patch_len)))
        masked = rng.permutation(num_patches)[: mask_count(num_patches, 0.5)]
        plan = MaskPlan(masked_indices=masked, mask_ratio=0.5, num_patches=num_patches)
        return torch_gradcheck(
            "reconstruction_loss",
            lambda: reconstruction_loss(pred, target, plan, normalize_targets=True),
            [pred],
            h,
            tolerance,
        )

    def finetune_once() -> GradCheckReport:
        model = _micro_network(rng)
        images = torch.tensor(rng.uniform(size=(4, 8, 8, 1)))
        raw = np.exp(rng.normal(size=(4, 3)))
        targets = torch.tensor(raw / raw.sum(axis=1, keepdims=True))
        pos = _random_positive_mask(rng, 4)
        cfg = LossConfig(temperature=0.07, loss_weight=0.1)

        def make_loss():
            tokens, reps = model.represent(images)
            logits = model.classifier(reps)
            z = model.projector(reps)
            return total_finetune_loss(logits, targets, z, pos, cfg).total

        return torch_gradcheck("finetune_forward", make_loss, list(model.parameters()), h, tolerance)

    def pretrain_once() -> GradCheckReport:
        from .masking import sample_mask

        model = _micro_network(rng, with_decoder=True)
        images = torch.tensor(rng.uniform(size=(3, 8, 8, 1)))
        plans = [sample_mask(4, 0.5, rng) for _ in range(3)]
        visible = torch.from_numpy(np.stack([p.visible_indices for p in plans]))
        target = patchify_tensor(images, 4)

        def make_loss():
            tokens = model.encoder(images, visible=visible)
            pred = model.decoder(tokens, visible)
            return reconstruction_loss(pred, target, plans, normalize_targets=True)

        return torch_gradcheck("pretrain_forward", make_loss, list(model.parameters()), h, tolerance)

    aggregate("cross_entropy", ce_once)
    aggregate("mscl_loss", mscl_once)
    aggregate("reconstruction_loss", recon_once)
    aggregate("finetune_forward", finetune_once)
    aggregate("pretrain_forward", pretrain_once)
    return reports
