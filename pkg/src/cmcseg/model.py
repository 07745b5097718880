r"""Two-branch 3-D ViT segmentation network with cross-modality fusion.

Pipeline per forward pass::

    x_a -> E_a -> F_ds_a -> MIA_a -\
                                    fuse -> D_a -> logits_a
    x_b -> E_b -> F_ds_b -> MIA_b -/      \-> D_b -> logits_b

Encoders are ViT stacks over non-overlapping p^3 patches with a convolutional
adapter after every block. With ``mia_enabled=False`` the raw DS features are
fused directly; with ``modality_specific_encoder=False`` both branches share
one encoder.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    patch_size: int = 8
    embed_dim: int = 32
    num_blocks: int = 4
    num_heads: int = 4
    adapter_dim: int = 8
    num_classes: int = 3
    input_shape: tuple[int, int, int] = (32, 32, 32)
    decoder_channels: tuple[int, ...] = (32, 16, 8)
    mlp_ratio: float = 2.0
    use_adapters: bool = True
    mia_enabled: bool = True
    modality_specific_encoder: bool = True
    decoder_skip: bool = False

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        p = self.patch_size
        if p < 1 or any(s % p for s in self.input_shape):
            raise ConfigError(f"input shape {self.input_shape} not divisible by patch size {p}")
        if not 0 < self.adapter_dim < self.embed_dim:
            raise ConfigError(f"adapter_dim must satisfy 0 < r < C, got r={self.adapter_dim}, C={self.embed_dim}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"num_heads {self.num_heads} must divide embed_dim {self.embed_dim}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        stages = int(round(math.log2(p))) if p > 1 else 0
        if 2 ** stages != p:
            raise ConfigError(f"patch size must be a power of two, got {p}")
        if len(self.decoder_channels) != stages:
            raise ConfigError(f"need {stages} decoder stages for patch size {p}, got {len(self.decoder_channels)}")

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        return tuple(s // self.patch_size for s in self.input_shape)

    @property
    def num_tokens(self) -> int:
        return math.prod(self.grid_shape)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["decoder_channels"] = list(self.decoder_channels)
        return d


class FeatureOutputs(NamedTuple):
    logits_a: torch.Tensor
    logits_b: torch.Tensor
    f_ds_a: torch.Tensor
    f_ds_b: torch.Tensor


def tokens_to_grid(tokens: torch.Tensor, grid) -> torch.Tensor:
    b, n, c = tokens.shape
    return tokens.transpose(1, 2).reshape(b, c, *grid)


def grid_to_tokens(x: torch.Tensor) -> torch.Tensor:
    return x.flatten(2).transpose(1, 2)


class PatchEmbed3D(nn.Module):
    """Non-overlapping p^3 patches -> C-wide tokens (row-major order) plus learned positions."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.input_shape = cfg.input_shape
        self.proj = nn.Conv3d(1, cfg.embed_dim, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_tokens, cfg.embed_dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def forward(self, x):
        if tuple(x.shape[-3:]) != self.input_shape:
            raise ConfigError(f"input spatial shape {tuple(x.shape[-3:])} != configured {self.input_shape}")
        return grid_to_tokens(self.proj(x)) + self.pos_embed


class ConvAdapter3D(nn.Module):
    """Bottleneck adapter on the token grid: x + up(GELU(down(x))).

    ``down`` is 3x3x3 (C -> r), ``up`` is 1x1x1 (r -> C) and starts at zero,
    so a fresh adapter is exactly the identity.
    """

    def __init__(self, dim: int, bottleneck: int):
        super().__init__()
        self.down = nn.Conv3d(dim, bottleneck, kernel_size=3, padding=1)
        self.act = nn.GELU()
        self.up = nn.Conv3d(bottleneck, dim, kernel_size=1)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(self, tokens, grid):
        x = tokens_to_grid(tokens, grid)
        return tokens + grid_to_tokens(self.up(self.act(self.down(x))))


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.embed_dim
        self.norm1 = nn.LayerNorm(c)
        self.attn = nn.MultiheadAttention(c, cfg.num_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(c)
        hidden = int(c * cfg.mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(c, hidden), nn.GELU(), nn.Linear(hidden, c))
        self.adapter = ConvAdapter3D(c, cfg.adapter_dim) if cfg.use_adapters else None

    def forward(self, x, grid):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        x = x + self.mlp(self.norm2(x))
        if self.adapter is not None:
            x = self.adapter(x, grid)
        return x


class Encoder3D(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.grid = cfg.grid_shape
        self.embed = PatchEmbed3D(cfg)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.num_blocks))
        self.norm = nn.LayerNorm(cfg.embed_dim)

    def forward(self, x):
        tokens = self.embed(x)
        for blk in self.blocks:
            tokens = blk(tokens, self.grid)
        return tokens_to_grid(self.norm(tokens), self.grid)


class MIA(nn.Module):
    """Channel attention (pool -> 2-layer gate -> sigmoid) then a residual 3x3x3 conv."""

    def __init__(self, dim: int, reduction: int = 4):
        super().__init__()
        hidden = max(1, dim // reduction)
        self.gate = nn.Sequential(nn.Linear(dim, hidden), nn.ReLU(), nn.Linear(hidden, dim))
        self.conv = nn.Conv3d(dim, dim, kernel_size=3, padding=1)

    def gates(self, f):
        return torch.sigmoid(self.gate(f.mean(dim=(2, 3, 4))))

    def forward(self, f):
        g = self.gates(f)[:, :, None, None, None]
        return f + self.conv(f * g)


class Fusion(nn.Module):
    """Concatenate [f_a, f_b] along channels, then 1x1x1 conv 2C -> C."""

    def __init__(self, dim: int):
        super().__init__()
        self.conv = nn.Conv3d(2 * dim, dim, kernel_size=1)

    def init_average(self):
        """Set weights so that fuse(f, f) == f."""
        c = self.conv.out_channels
        with torch.no_grad():
            eye = torch.eye(c)[:, :, None, None, None]
            self.conv.weight.copy_(torch.cat([eye, eye], dim=1) / 2)
            self.conv.bias.zero_()

    def forward(self, f_a, f_b):
        if f_a.shape != f_b.shape:
            raise ValueError(f"cannot fuse feature maps of shapes {tuple(f_a.shape)} and {tuple(f_b.shape)}")
        return self.conv(torch.cat([f_a, f_b], dim=1))


class Decoder3D(nn.Module):
    """Transposed-conv upsampling by 2 per stage back to full resolution, then 1x1x1 to K logits."""

    def __init__(self, cfg: ModelConfig, in_channels: int):
        super().__init__()
        stages = []
        ch = in_channels
        for out in cfg.decoder_channels:
            stages.append(nn.Sequential(
                nn.ConvTranspose3d(ch, out, kernel_size=2, stride=2),
                nn.GELU(),
                nn.Conv3d(out, out, kernel_size=3, padding=1),
                nn.InstanceNorm3d(out, affine=True),
                nn.GELU(),
            ))
            ch = out
        self.stages = nn.Sequential(*stages)
        self.head = nn.Conv3d(ch, cfg.num_classes, kernel_size=1)

    def forward(self, f):
        return self.head(self.stages(f))


class CMCSegNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder_a = Encoder3D(cfg)
        self.encoder_b = Encoder3D(cfg) if cfg.modality_specific_encoder else self.encoder_a
        if cfg.mia_enabled:
            self.mia_a = MIA(cfg.embed_dim)
            self.mia_b = MIA(cfg.embed_dim)
        self.fusion = Fusion(cfg.embed_dim)
        dec_in = cfg.embed_dim * (2 if cfg.decoder_skip else 1)
        self.decoder_a = Decoder3D(cfg, dec_in)
        self.decoder_b = Decoder3D(cfg, dec_in)

    def encode(self, x, which: str):
        return (self.encoder_a if which == "a" else self.encoder_b)(x)

    def mia(self, f, which: str):
        if not self.cfg.mia_enabled:
            return f
        return (self.mia_a if which == "a" else self.mia_b)(f)

    def fuse(self, f_a, f_b):
        return self.fusion(f_a, f_b)

    def decode(self, fused, which: str, skip=None):
        if self.cfg.decoder_skip:
            fused = torch.cat([fused, skip], dim=1)
        return (self.decoder_a if which == "a" else self.decoder_b)(fused)

    def forward(self, x_a, x_b) -> FeatureOutputs:
        """x_a, x_b: (B, 1, D, H, W) normalized volumes."""
        f_a = self.encode(x_a, "a")
        f_b = self.encode(x_b, "b")
        fused = self.fuse(self.mia(f_a, "a"), self.mia(f_b, "b"))
        return FeatureOutputs(self.decode(fused, "a", f_a), self.decode(fused, "b", f_b), f_a, f_b)


def build_model(cfg: ModelConfig, seed: int | None = None) -> CMCSegNet:
    if seed is not None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return CMCSegNet(cfg)
    return CMCSegNet(cfg)


def save_checkpoint(model: CMCSegNet, path, **extra) -> None:
    """Archive keys: ``model_config`` (dict), ``state_dict`` (hierarchical parameter names), plus ``extra``."""
    torch.save({"model_config": model.cfg.to_dict(), "state_dict": model.state_dict(), **extra}, path)


def load_checkpoint(path) -> tuple[CMCSegNet, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    model = CMCSegNet(ModelConfig(**payload["model_config"]))
    model.load_state_dict(payload["state_dict"])
    return model, payload
