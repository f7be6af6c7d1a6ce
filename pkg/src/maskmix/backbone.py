"""Desk-scale ViT encoder/decoder, projection and classification heads.

The encoder is a standard pre-norm transformer over patch tokens. During
masked pre-training it sees only visible patches; the decoder re-inserts a
learned mask token at masked positions and predicts raw pixels per patch.

Also home to the checkpoint container format (named float32 tensors behind a
JSON manifest), since every other module round-trips weights through it.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ConfigError, ContractViolation, NumericFault, RandomSource

CHECKPOINT_MAGIC = b"MMIXCKPT"
CHECKPOINT_FORMAT_VERSION = 1
PROJECTION_NORM_EPS = 1e-12


class CheckpointError(RuntimeError):
    """A checkpoint file is unreadable or incompatible with the model."""


@dataclass(frozen=True)
class EncoderConfig:
    """Geometry of the encoder (and its lightweight pre-training decoder)."""

    image_size: int = 32
    patch_size: int = 4
    channels: int = 1
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: float = 2.0
    use_class_token: bool = False
    decoder_dim: int = 32
    decoder_depth: int = 2
    decoder_num_heads: int = 4

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.decoder_dim % self.decoder_num_heads:
            raise ConfigError("decoder_dim not divisible by decoder_num_heads")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size**2

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.channels


@dataclass(frozen=True)
class EmbeddingBatch:
    """Pooled per-sample representations, one row per sample."""

    reps: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.reps)
        if arr.ndim != 2:
            raise ContractViolation(f"reps must be batch x dim, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NumericFault("embedding batch contains non-finite values")
        object.__setattr__(self, "reps", arr)

    @staticmethod
    def from_tensor(t: torch.Tensor) -> "EmbeddingBatch":
        return EmbeddingBatch(t.detach().cpu().numpy())


@dataclass(frozen=True)
class ProjectionBatch:
    """Row-normalized projections; every row has unit L2 norm."""

    z: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.z)
        if arr.ndim != 2:
            raise ContractViolation(f"z must be batch x dim, got shape {arr.shape}")
        norms = np.linalg.norm(arr, axis=1)
        if np.abs(norms - 1.0).max() > 1e-6:
            raise ContractViolation("projection rows must be unit-normalized")
        object.__setattr__(self, "z", arr)

    @staticmethod
    def from_tensor(t: torch.Tensor) -> "ProjectionBatch":
        return ProjectionBatch(t.detach().cpu().numpy())


class Block(nn.Module):
    """Pre-norm transformer block: LN -> MHA -> residual, LN -> MLP -> residual."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        self.num_heads = num_heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.attn_out = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(mlp_ratio * dim)
        self.mlp_in = nn.Linear(dim, hidden)
        self.mlp_out = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(self.norm1(x)).view(b, n, 3, self.num_heads, d // self.num_heads)
        qkv = qkv.permute(2, 0, 3, 1, 4)
        attn = F.scaled_dot_product_attention(qkv[0], qkv[1], qkv[2])
        x = x + self.attn_out(attn.transpose(1, 2).reshape(b, n, d))
        return x + self.mlp_out(F.gelu(self.mlp_in(self.norm2(x)), approximate="tanh"))


def patchify_tensor(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(B, H, W, C) -> (B, D, P*P*C), row-major, matching masking.patchify."""
    b, h, w, c = images.shape
    p = patch_size
    rows, cols = h // p, w // p
    return (
        images.view(b, rows, p, cols, p, c)
        .permute(0, 1, 3, 2, 4, 5)
        .reshape(b, rows * cols, p * p * c)
    )


class Encoder(nn.Module):
    """ViT encoder over patch tokens, optionally restricted to visible patches."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = nn.Linear(cfg.patch_dim, cfg.embed_dim)
        self.pos_embed = nn.Parameter(torch.zeros(cfg.num_patches, cfg.embed_dim))
        if cfg.use_class_token:
            self.class_token = nn.Parameter(torch.zeros(cfg.embed_dim))
        self.blocks = nn.ModuleList(
            [Block(cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.depth)]
        )
        self.norm = nn.LayerNorm(cfg.embed_dim)

    def forward(
        self,
        images: torch.Tensor,
        visible: Optional[torch.Tensor] = None,
        check_finite: bool = False,
    ) -> torch.Tensor:
        """Encode images to a token sequence (class token first when present).

        ``visible`` is an optional (B, V) index tensor; when given, only those
        patch tokens (in the given order) enter the transformer.
        """
        cfg = self.cfg
        b, h, w, c = images.shape
        if h != cfg.image_size or w != cfg.image_size or c != cfg.channels:
            raise ContractViolation(
                f"images {h}x{w}x{c} do not match config {cfg.image_size}x{cfg.image_size}x{cfg.channels}"
            )
        patches = patchify_tensor(images, cfg.patch_size)
        if visible is not None:
            patches = torch.gather(patches, 1, visible.unsqueeze(-1).expand(-1, -1, cfg.patch_dim))
            pos = self.pos_embed.unsqueeze(0).expand(b, -1, -1)
            pos = torch.gather(pos, 1, visible.unsqueeze(-1).expand(-1, -1, cfg.embed_dim))
        else:
            pos = self.pos_embed
        x = self.patch_embed(patches) + pos
        if cfg.use_class_token:
            cls = self.class_token.expand(b, 1, -1)
            x = torch.cat([cls, x], dim=1)
        for i, block in enumerate(self.blocks):
            x = block(x)
            if check_finite and not torch.isfinite(x).all():
                raise NumericFault(f"non-finite activations after encoder block {i}")
        return self.norm(x)


class Decoder(nn.Module):
    """Lightweight decoder: mask tokens re-inserted, full grid, pixel head."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Linear(cfg.embed_dim, cfg.decoder_dim)
        self.mask_token = nn.Parameter(torch.zeros(cfg.decoder_dim))
        self.pos_embed = nn.Parameter(torch.zeros(cfg.num_patches, cfg.decoder_dim))
        self.blocks = nn.ModuleList(
            [Block(cfg.decoder_dim, cfg.decoder_num_heads, cfg.mlp_ratio) for _ in range(cfg.decoder_depth)]
        )
        self.norm = nn.LayerNorm(cfg.decoder_dim)
        self.pixel_head = nn.Linear(cfg.decoder_dim, cfg.patch_dim)

    def forward(self, visible_tokens: torch.Tensor, visible: torch.Tensor) -> torch.Tensor:
        """Predict all patches from encoded visible tokens.

        ``visible_tokens`` are the encoder's patch tokens (class token already
        stripped), ``visible`` their patch indices; output is (B, D, P*P*C).
        """
        cfg = self.cfg
        b, v, _ = visible_tokens.shape
        if visible.shape != (b, v):
            raise ContractViolation(
                f"visible indices {tuple(visible.shape)} do not match tokens {(b, v)}"
            )
        embedded = self.embed(visible_tokens)
        x = self.mask_token.expand(b, cfg.num_patches, -1).clone()
        x.scatter_(1, visible.unsqueeze(-1).expand(-1, -1, cfg.decoder_dim), embedded)
        x = x + self.pos_embed
        for block in self.blocks:
            x = block(x)
        return self.pixel_head(self.norm(x))


def pool_head(tokens: torch.Tensor, mode: str, has_class_token: bool = False) -> torch.Tensor:
    """Pool a token sequence into one representation per sample.

    ``gap`` averages the patch tokens (class token excluded); ``class_token``
    returns that token alone and requires the sequence to carry one.
    """
    if mode == "gap":
        start = 1 if has_class_token else 0
        return tokens[:, start:].mean(dim=1)
    if mode == "class_token":
        if not has_class_token:
            raise ConfigError("class_token pooling requested but the encoder has no class token")
        return tokens[:, 0]
    raise ConfigError(f"unknown pooling mode {mode!r}")


class ProjectionHead(nn.Module):
    """Map representations into the contrastive space and L2-normalize.

    Variants: ``none`` (identity), ``linear`` (one affine map), ``dense``
    (affine -> ReLU -> affine).
    """

    VARIANTS = ("none", "linear", "dense")

    def __init__(self, embed_dim: int, proj_dim: int, variant: str = "dense"):
        super().__init__()
        if variant not in self.VARIANTS:
            raise ConfigError(f"projection head variant must be one of {self.VARIANTS}, got {variant!r}")
        self.variant = variant
        if variant == "linear":
            self.fc = nn.Linear(embed_dim, proj_dim)
        elif variant == "dense":
            self.fc_in = nn.Linear(embed_dim, embed_dim)
            self.fc_out = nn.Linear(embed_dim, proj_dim)

    def forward(self, reps: torch.Tensor) -> torch.Tensor:
        if self.variant == "none":
            z = reps
        elif self.variant == "linear":
            z = self.fc(reps)
        else:
            z = self.fc_out(F.relu(self.fc_in(reps)))
        norms = z.norm(dim=1, keepdim=True)
        if (norms < PROJECTION_NORM_EPS).any():
            warnings.warn("zero-norm projection row; epsilon guard applied", RuntimeWarning)
        return z / norms.clamp_min(PROJECTION_NORM_EPS)


class ClassificationHead(nn.Module):
    """Single affine map to class logits; softmax lives in the loss."""

    def __init__(self, embed_dim: int, num_classes: int):
        super().__init__()
        self.fc = nn.Linear(embed_dim, num_classes)

    def forward(self, reps: torch.Tensor) -> torch.Tensor:
        return self.fc(reps)


class Network(nn.Module):
    """Encoder plus whichever heads the current stage needs."""

    def __init__(
        self,
        cfg: EncoderConfig,
        num_classes: Optional[int] = None,
        projection_dim: Optional[int] = None,
        projection_variant: str = "dense",
        pool_mode: str = "gap",
        with_decoder: bool = False,
    ):
        super().__init__()
        self.cfg = cfg
        self.pool_mode = pool_mode
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg) if with_decoder else None
        self.classifier = ClassificationHead(cfg.embed_dim, num_classes) if num_classes else None
        if projection_dim:
            self.projector = ProjectionHead(cfg.embed_dim, projection_dim, projection_variant)
        else:
            self.projector = None

    def represent(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Full-image encoding: returns (token sequence, pooled representations)."""
        tokens = self.encoder(images)
        return tokens, pool_head(tokens, self.pool_mode, self.cfg.use_class_token)


def init_parameters(module: nn.Module, rng: RandomSource, std: float = 0.02) -> None:
    """Deterministic init from an explicit random source.

    Weight matrices get truncated normal (sigma=0.02, clipped at 2 sigma);
    biases and norm offsets get zeros, norm gains ones; token parameters
    (class/mask/positional) get sigma=0.02 truncated normal noise. Parameters
    are visited in definition order, so a fixed seed yields identical weights
    everywhere.
    """
    for name, param in module.named_parameters():
        leaf = name.rsplit(".", 1)[-1]
        with torch.no_grad():
            if leaf in ("pos_embed", "class_token", "mask_token") or param.dim() >= 2:
                vals = rng.truncated_normal(std, tuple(param.shape))
                param.copy_(torch.from_numpy(vals).to(param.dtype))
            elif leaf == "weight":
                param.fill_(1.0)
            else:
                param.zero_()


# -- checkpoint container ---------------------------------------------------


@dataclass
class Checkpoint:
    """Named float32 tensors plus a metadata record (config, stage, epoch, seed)."""

    tensors: dict
    metadata: dict

    def save(self, path) -> None:
        save_checkpoint(path, self.tensors, self.metadata)

    @staticmethod
    def load(path) -> "Checkpoint":
        tensors, metadata = load_checkpoint(path)
        return Checkpoint(tensors=tensors, metadata=metadata)


def save_checkpoint(path, tensors: dict, metadata: dict) -> None:
    """Write named tensors plus metadata to the container format.

    Layout: 8-byte magic, little-endian u32 header length, UTF-8 JSON header
    (format version, metadata, per-tensor name/shape/element count), then the
    float32 little-endian payloads concatenated in header order.
    """
    manifest = []
    payloads = []
    for name in sorted(tensors):
        t = tensors[name]
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        arr = np.ascontiguousarray(arr, dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "numel": int(arr.size)})
        payloads.append(arr.tobytes())
    header = json.dumps(
        {"format_version": CHECKPOINT_FORMAT_VERSION, "metadata": metadata, "tensors": manifest},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for chunk in payloads:
            fh.write(chunk)


def load_checkpoint(path) -> tuple[dict, dict]:
    """Read a checkpoint container back into (tensors, metadata)."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported format version {header.get('format_version')}"
            )
        tensors = {}
        for entry in header["tensors"]:
            raw = fh.read(entry["numel"] * 4)
            if len(raw) != entry["numel"] * 4:
                raise CheckpointError(f"{path}: truncated payload for tensor {entry['name']}")
            tensors[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
    return tensors, header["metadata"]


def state_tensors(module: nn.Module, prefix: str = "") -> dict:
    """Named parameters of a module as plain arrays for checkpointing."""
    return {prefix + name: p for name, p in module.state_dict().items()}


def load_state(module: nn.Module, tensors: dict, prefix: str = "") -> None:
    """Load checkpoint tensors into a module, verifying names and shapes.

    Raises CheckpointError listing every missing, unexpected, or
    shape-mismatched tensor name under the given prefix.
    """
    own = module.state_dict()
    available = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    missing = sorted(set(own) - set(available))
    unexpected = sorted(set(available) - set(own))
    mismatched = sorted(
        name for name in set(own) & set(available) if tuple(own[name].shape) != tuple(available[name].shape)
    )
    if missing or unexpected or mismatched:
        raise CheckpointError(
            "checkpoint incompatible with model: "
            f"missing={missing} unexpected={unexpected} shape_mismatch={mismatched}"
        )
    converted = {}
    for name in own:
        value = available[name]
        if isinstance(value, torch.Tensor):
            converted[name] = value.detach().clone().to(own[name].dtype)
        else:
            converted[name] = torch.from_numpy(np.ascontiguousarray(value)).to(own[name].dtype)
    module.load_state_dict(converted)


def encoder_config_to_dict(cfg: EncoderConfig) -> dict:
    return asdict(cfg)


def encoder_config_from_dict(d: dict) -> EncoderConfig:
    return EncoderConfig(**d)
