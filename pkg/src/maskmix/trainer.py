"""Two-stage training: masked pre-training, then contrastive fine-tuning.

Stage 1 reconstructs masked patches of a general-image corpus. Stage 2 loads
the encoder (dropping the decoder), then trains classification and projection
heads jointly: cross-entropy on soft targets plus a weighted contrastive term
whose positives come from the configured selection rule. The optimizer is
Adam with decoupled weight decay, layer-wise learning-rate decay, and a
cosine schedule with linear warmup.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np
import torch

from .backbone import (
    Checkpoint,
    EncoderConfig,
    Network,
    encoder_config_from_dict,
    init_parameters,
    load_state,
    state_tensors,
)
from .core import ConfigError, ContractViolation, NumericFault, RandomSource
from .data import LoadedDataset
from .losses import FinetuneLossParts, LossConfig, class_mask, sibling_mask, total_finetune_loss
from .masking import patchify_batch, reconstruction_loss, sample_mask
from .mixing import MixPolicy, augment_two_views, build_pair_mask, mix_multiview

CONTRASTIVE_MODES = ("none", "sscl", "scl", "mscl")


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training stage needs, mirroring the config file schema."""

    stage: str = "finetune"
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-4
    weight_decay: float = 5e-4
    layer_decay: float = 0.65
    warmup_epochs: float = 1.0
    mask_ratio: float = 0.75
    normalize_targets: bool = True
    masked_only: bool = True
    contrastive: str = "mscl"
    balanced_sampling: bool = False
    seed: int = 0
    projection_dim: int = 128
    projection_head: str = "dense"
    classification_head: str = "gap"
    augment: bool = True
    crop_scale: tuple = (0.67, 1.0)
    hflip_prob: float = 0.5
    eval_every: int = 1
    mix: MixPolicy = field(default_factory=MixPolicy)
    loss: LossConfig = field(default_factory=LossConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if self.stage not in ("pretrain", "finetune"):
            raise ConfigError(f"stage must be pretrain or finetune, got {self.stage!r}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if not 0.0 < self.layer_decay <= 1.0:
            raise ConfigError(f"layer_decay must lie in (0, 1], got {self.layer_decay}")
        if self.contrastive not in CONTRASTIVE_MODES:
            raise ConfigError(f"contrastive must be one of {CONTRASTIVE_MODES}, got {self.contrastive!r}")
        if self.contrastive == "scl" and self.mix.enabled:
            raise ConfigError("the class-supervised loss needs one-hot labels; disable mixing for scl")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        if "mix" in d and isinstance(d["mix"], dict):
            d["mix"] = MixPolicy(**d["mix"])
        if "loss" in d and isinstance(d["loss"], dict):
            d["loss"] = LossConfig(**d["loss"])
        if "encoder" in d and isinstance(d["encoder"], dict):
            d["encoder"] = encoder_config_from_dict(d["encoder"])
        if "crop_scale" in d and d["crop_scale"] is not None:
            d["crop_scale"] = tuple(d["crop_scale"])
        return TrainConfig(**d)


@dataclass
class EpochRecord:
    """One RunReport row; None marks a quantity the stage does not produce."""

    epoch: int
    stage: str
    total_loss: Optional[float] = None
    ce_loss: Optional[float] = None
    contrastive_loss: Optional[float] = None
    recon_loss: Optional[float] = None
    train_acc: Optional[float] = None
    eval_acc: Optional[float] = None
    skipped_anchors: Optional[int] = None
    wall_time_s: Optional[float] = None


@dataclass
class RunReport:
    """Per-epoch training records with a fixed, documented column set."""

    records: list[EpochRecord] = field(default_factory=list)

    COLUMNS = (
        "epoch",
        "stage",
        "total_loss",
        "ce_loss",
        "contrastive_loss",
        "recon_loss",
        "train_acc",
        "eval_acc",
        "skipped_anchors",
        "wall_time_s",
    )

    def append(self, record: EpochRecord) -> None:
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ContractViolation(
                f"epoch numbering must increase: {record.epoch} after {self.records[-1].epoch}"
            )
        for name in ("total_loss", "ce_loss", "contrastive_loss", "recon_loss", "train_acc", "eval_acc"):
            value = getattr(record, name)
            if value is not None and not math.isfinite(value):
                raise NumericFault(f"epoch {record.epoch}: recorded {name} is not finite")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def final(self, name: str):
        for record in reversed(self.records):
            value = getattr(record, name)
            if value is not None:
                return value
        return None


@dataclass(frozen=True)
class EvalResult:
    """Overall accuracy, per-class accuracies, and the confusion matrix."""

    accuracy: float
    per_class: np.ndarray
    confusion: np.ndarray


# -- optimizer ----------------------------------------------------------------


def layer_id(param_name: str, depth: int) -> int:
    """Map a parameter to its depth index for layer-wise lr decay.

    The patch embedding and token parameters form layer 0, encoder block i is
    layer i+1, and everything after the trunk (final norm, classifier,
    projector, decoder) is the head layer depth+1, which receives the base lr.
    """
    if param_name.startswith(("encoder.patch_embed", "encoder.pos_embed", "encoder.class_token")):
        return 0
    if param_name.startswith("encoder.blocks."):
        return int(param_name.split(".")[2]) + 1
    return depth + 1


def build_optimizer(model: Network, cfg: TrainConfig) -> torch.optim.AdamW:
    """AdamW with per-layer lr scales and decay-exempt 1-d parameters."""
    depth = cfg.encoder.depth
    top = depth + 1
    groups: dict[tuple[int, bool], list] = {}
    for name, param in model.named_parameters():
        lid = layer_id(name, depth)
        decayed = param.dim() > 1
        groups.setdefault((lid, decayed), []).append(param)
    param_groups = []
    for (lid, decayed), params in sorted(groups.items()):
        scale = cfg.layer_decay ** (top - lid)
        param_groups.append(
            {
                "params": params,
                "lr": cfg.lr * scale,
                "weight_decay": cfg.weight_decay if decayed else 0.0,
                "layer_scale": scale,
            }
        )
    return torch.optim.AdamW(
        param_groups, lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8, foreach=True
    )


def lr_factor(step: int, total_steps: int, warmup_steps: int) -> float:
    """Linear warmup to 1, then cosine decay to 0 over the remaining steps."""
    if warmup_steps > 0 and step < warmup_steps:
        return (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = (step - warmup_steps) / span
    return 0.5 * (1.0 + math.cos(math.pi * progress))


def apply_lr(optimizer: torch.optim.Optimizer, base_lr: float, factor: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = base_lr * group["layer_scale"] * factor


def _grad_norms(model: torch.nn.Module) -> dict[str, float]:
    out = {}
    for name, param in model.named_parameters():
        if param.grad is not None:
            out[name] = float(param.grad.norm())
    return out


def _abort_if_nonfinite(loss: torch.Tensor, model, step: int, lr: float) -> None:
    if torch.isfinite(loss):
        return
    norms = _grad_norms(model)
    worst = sorted(norms.items(), key=lambda kv: -kv[1])[:5]
    raise NumericFault(
        f"non-finite loss at step {step} (lr={lr:.3g}); largest gradient norms: {worst}"
    )


# -- sampling -----------------------------------------------------------------


def balanced_sampler(dataset: LoadedDataset, rng: RandomSource) -> np.ndarray:
    """One epoch of with-replacement indices weighted by inverse class frequency."""
    labels = dataset.labels
    counts = np.bincount(labels, minlength=dataset.num_classes)
    if (counts == 0).any():
        empty = int(np.nonzero(counts == 0)[0][0])
        raise ConfigError(f"class {empty} has no samples; balanced sampling undefined")
    weights = 1.0 / counts[labels]
    probs = weights / weights.sum()
    return rng.choice(len(labels), size=len(labels), replace=True, p=probs)


def _epoch_indices(dataset: LoadedDataset, cfg: TrainConfig, rng: RandomSource) -> np.ndarray:
    if cfg.balanced_sampling:
        return balanced_sampler(dataset, rng)
    return rng.permutation(len(dataset.labels))


# -- stage 1: masked pre-training ----------------------------------------------


def pretrain(
    corpus: LoadedDataset,
    cfg: TrainConfig,
    rng: RandomSource,
) -> tuple[Checkpoint, RunReport]:
    """Masked-image reconstruction over a general-image corpus.

    Returns the encoder+decoder checkpoint (decoder flagged droppable) and the
    per-epoch report.
    """
    if cfg.stage != "pretrain":
        raise ConfigError(f"pretrain called with stage={cfg.stage!r}")
    torch.set_flush_denormal(True)  # denormal stalls dominate small-model CPU steps
    if len(corpus.labels) == 0:
        raise ContractViolation("pre-training corpus is empty")

    model = Network(cfg.encoder, with_decoder=True)
    init_rng = rng.split()
    data_rng = rng.split()
    mask_rng = rng.split()
    init_parameters(model, init_rng)

    optimizer = build_optimizer(model, cfg)
    steps_per_epoch = max(len(corpus.labels) // cfg.batch_size, 1)
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = int(round(cfg.warmup_epochs * steps_per_epoch))

    num_patches = cfg.encoder.num_patches
    report = RunReport()
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = data_rng.permutation(len(corpus.labels))
        epoch_loss, batches = 0.0, 0
        for b0 in range(0, steps_per_epoch * cfg.batch_size, cfg.batch_size):
            idx = order[b0 : b0 + cfg.batch_size]
            images = corpus.images[idx]
            plans = [sample_mask(num_patches, cfg.mask_ratio, mask_rng) for _ in range(len(idx))]
            visible = torch.from_numpy(np.stack([p.visible_indices for p in plans]))
            x = torch.from_numpy(images)
            tokens = model.encoder(x, visible=visible)
            if cfg.encoder.use_class_token:
                tokens = tokens[:, 1:]
            pred = model.decoder(tokens, visible)
            target = torch.from_numpy(patchify_batch(images, cfg.encoder.patch_size))
            loss = reconstruction_loss(
                pred, target, plans, normalize_targets=cfg.normalize_targets, masked_only=cfg.masked_only
            )
            factor = lr_factor(step, total_steps, warmup_steps)
            _abort_if_nonfinite(loss, model, step, cfg.lr * factor)
            apply_lr(optimizer, cfg.lr, factor)
            loss.backward()
            optimizer.step()
            optimizer.zero_grad(set_to_none=True)
            epoch_loss += float(loss.detach())
            batches += 1
            step += 1
        report.append(
            EpochRecord(
                epoch=epoch + 1,
                stage="pretrain",
                total_loss=epoch_loss / batches,
                recon_loss=epoch_loss / batches,
                wall_time_s=time.perf_counter() - t0,
            )
        )

    metadata = {
        "stage": "pretrain",
        "epoch": cfg.epochs,
        "seed": cfg.seed,
        "encoder": asdict(cfg.encoder),
        "droppable": ["decoder."],
        "train_config": cfg.to_dict(),
    }
    return Checkpoint(tensors=state_tensors(model), metadata=metadata), report


# -- stage 2: contrastive fine-tuning -------------------------------------------


def _positive_mask(cfg: TrainConfig, batch) -> Optional[np.ndarray]:
    if cfg.contrastive == "none" or cfg.loss.loss_weight == 0.0:
        return None
    if cfg.contrastive == "mscl":
        return build_pair_mask(batch, cfg.loss.threshold).positives()
    if cfg.contrastive == "scl":
        return class_mask(batch.labels)
    return sibling_mask(batch.view_of)


def finetune(
    dataset: LoadedDataset,
    init: Optional[Checkpoint],
    cfg: TrainConfig,
    rng: RandomSource,
    eval_dataset: Optional[LoadedDataset] = None,
) -> tuple[Checkpoint, RunReport]:
    """Joint classification + contrastive fine-tuning from a pre-trained encoder.

    ``init`` supplies encoder weights (its decoder is dropped); None trains
    from scratch. Heads always start fresh: they do not exist at pre-training
    time.
    """
    if cfg.stage != "finetune":
        raise ConfigError(f"finetune called with stage={cfg.stage!r}")
    torch.set_flush_denormal(True)
    num_classes = dataset.num_classes
    model = Network(
        cfg.encoder,
        num_classes=num_classes,
        projection_dim=cfg.projection_dim,
        projection_variant=cfg.projection_head,
        pool_mode=cfg.classification_head,
    )
    init_rng = rng.split()
    data_rng = rng.split()
    aug_rng = rng.split()
    mix_rng = rng.split()
    init_parameters(model, init_rng)
    if init is not None:
        load_state(model.encoder, init.tensors, prefix="encoder.")

    optimizer = build_optimizer(model, cfg)
    steps_per_epoch = max(len(dataset.labels) // cfg.batch_size, 1)
    total_steps = cfg.epochs * steps_per_epoch
    warmup_steps = int(round(cfg.warmup_epochs * steps_per_epoch))

    report = RunReport()
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = _epoch_indices(dataset, cfg, data_rng)
        sums = {"total": 0.0, "ce": 0.0, "cl": 0.0}
        skipped = 0
        hits = 0
        seen = 0
        for b0 in range(0, steps_per_epoch * cfg.batch_size, cfg.batch_size):
            idx = order[b0 : b0 + cfg.batch_size]
            batch = augment_two_views(
                dataset.take(idx),
                aug_rng,
                enabled=cfg.augment,
                crop_scale=cfg.crop_scale,
                hflip_prob=cfg.hflip_prob,
            )
            batch = mix_multiview(batch, cfg.mix, mix_rng)
            pos = _positive_mask(cfg, batch)

            x = torch.from_numpy(batch.images)
            targets = torch.from_numpy(batch.labels.astype(np.float32))
            tokens, reps = model.represent(x)
            logits = model.classifier(reps)
            z = model.projector(reps) if pos is not None else None
            parts: FinetuneLossParts = total_finetune_loss(logits, targets, z, pos, cfg.loss)

            factor = lr_factor(step, total_steps, warmup_steps)
            _abort_if_nonfinite(parts.total, model, step, cfg.lr * factor)
            apply_lr(optimizer, cfg.lr, factor)
            parts.total.backward()
            optimizer.step()
            optimizer.zero_grad(set_to_none=True)

            sums["total"] += float(parts.total.detach())
            sums["ce"] += float(parts.cross_entropy.detach())
            sums["cl"] += float(parts.contrastive.detach())
            skipped += parts.skipped_anchors
            hits += int((logits.detach().argmax(1).numpy() == batch.labels.argmax(1)).sum())
            seen += len(batch)
            step += 1

        record = EpochRecord(
            epoch=epoch + 1,
            stage="finetune",
            total_loss=sums["total"] / steps_per_epoch,
            ce_loss=sums["ce"] / steps_per_epoch,
            contrastive_loss=sums["cl"] / steps_per_epoch,
            train_acc=hits / seen,
            skipped_anchors=skipped,
        )
        if eval_dataset is not None and (
            (epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs
        ):
            record.eval_acc = evaluate_network(model, eval_dataset).accuracy
        record.wall_time_s = time.perf_counter() - t0
        report.append(record)

    metadata = {
        "stage": "finetune",
        "epoch": cfg.epochs,
        "seed": cfg.seed,
        "encoder": asdict(cfg.encoder),
        "num_classes": num_classes,
        "projection_dim": cfg.projection_dim,
        "projection_head": cfg.projection_head,
        "classification_head": cfg.classification_head,
        "train_config": cfg.to_dict(),
    }
    return Checkpoint(tensors=state_tensors(model), metadata=metadata), report


# -- evaluation ----------------------------------------------------------------


def evaluate_network(model: Network, dataset: LoadedDataset, batch_size: int = 256) -> EvalResult:
    """Deterministic single-crop evaluation: argmax of logits, no augmentation."""
    if model.classifier is None:
        raise ConfigError("model has no classification head")
    num_classes = model.classifier.fc.out_features
    if num_classes != dataset.num_classes:
        raise ConfigError(
            f"head predicts {num_classes} classes but dataset has {dataset.num_classes}"
        )
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    was_training = model.training
    model.eval()
    with torch.inference_mode():
        for b0 in range(0, len(dataset.labels), batch_size):
            images = torch.from_numpy(dataset.images[b0 : b0 + batch_size])
            _, reps = model.represent(images)
            pred = model.classifier(reps).argmax(1).numpy()
            true = dataset.labels[b0 : b0 + batch_size]
            np.add.at(confusion, (true, pred), 1)
    if was_training:
        model.train()
    totals = confusion.sum(axis=1)
    per_class = np.divide(
        np.diag(confusion), totals, out=np.zeros(num_classes, dtype=np.float64), where=totals > 0
    )
    accuracy = float(np.trace(confusion)) / float(confusion.sum())
    return EvalResult(accuracy=accuracy, per_class=per_class, confusion=confusion)


def network_from_checkpoint(checkpoint: Checkpoint) -> Network:
    """Rebuild a fine-tuned network (encoder + heads) from a checkpoint."""
    meta = checkpoint.metadata
    if "num_classes" not in meta:
        raise ConfigError("checkpoint has no classification head (pre-training stage?)")
    model = Network(
        encoder_config_from_dict(meta["encoder"]),
        num_classes=meta["num_classes"],
        projection_dim=meta.get("projection_dim"),
        projection_variant=meta.get("projection_head", "dense"),
        pool_mode=meta.get("classification_head", "gap"),
    )
    load_state(model, checkpoint.tensors)
    return model


def evaluate(dataset: LoadedDataset, checkpoint: Checkpoint) -> EvalResult:
    """Evaluate a checkpoint on a dataset (see evaluate_network)."""
    return evaluate_network(network_from_checkpoint(checkpoint), dataset)
