"""Patch-token transformer encoder with task-routed MoE feed-forward layers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .moe import ConfigError, MoEFeedForward, TaskId, assign_experts


class NumericError(FloatingPointError):
    def __init__(self, layer: int, message: str = "non-finite activations"):
        super().__init__(f"layer {layer}: {message}")
        self.layer = layer


@dataclass
class EncoderConfig:
    depth: int = 4
    width: int = 128
    heads: int = 4
    patch_size: int = 8
    image_size: int = 64
    channels: int = 3
    num_experts: int = 5
    moe_layers: list[int] | None = None  # 1-based; None = every layer
    expert_dropout_rate: float = 0.10
    mlp_ratio: int = 4

    def __post_init__(self):
        if not 1 <= self.depth <= 12:
            raise ConfigError(f"depth must be in [1, 12], got {self.depth}")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        if self.num_experts < 1:
            raise ConfigError("num_experts must be >= 1")
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        if not 0.0 <= self.expert_dropout_rate < 1.0:
            raise ConfigError("expert_dropout_rate must lie in [0, 1)")
        if self.moe_layers is not None and not set(self.moe_layers) <= set(range(1, self.depth + 1)):
            raise ConfigError(f"moe_layers {self.moe_layers} outside 1..{self.depth}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def moe_layer_set(self) -> list[int]:
        return sorted(self.moe_layers) if self.moe_layers is not None else list(range(1, self.depth + 1))


def init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02, a=-0.04, b=0.04)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


class Attention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (width // heads) ** -0.5
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.record = False
        self.last_attention: torch.Tensor | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        if self.record:
            self.last_attention = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class FeedForward(nn.Module):
    def __init__(self, width: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(width, hidden)
        self.fc2 = nn.Linear(hidden, width)

    def forward(self, x, task=None, active=None):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm block: ``x + MHSA(LN(x))`` then ``x + FFN(LN(x))``."""

    def __init__(self, width: int, heads: int, ffn: nn.Module):
        super().__init__()
        self.norm1 = nn.LayerNorm(width, eps=1e-6)
        self.attn = Attention(width, heads)
        self.norm2 = nn.LayerNorm(width, eps=1e-6)
        self.ffn = ffn

    def forward(self, x, task=None, active=None):
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x), task, active)


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.width
        self.assignment = assign_experts(cfg.num_experts)
        self.patch_embed = nn.Linear(cfg.patch_dim, d)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_patches + 1, d))
        # pixel standardization applied before the patch projection; identity until set from data
        self.register_buffer("pixel_mean", torch.tensor(0.0))
        self.register_buffer("pixel_std", torch.tensor(1.0))
        hidden = cfg.mlp_ratio * d
        moe = set(cfg.moe_layer_set)
        self.blocks = nn.ModuleList()
        for layer in range(1, cfg.depth + 1):
            ffn = (MoEFeedForward(d, hidden, self.assignment, cfg.num_experts) if layer in moe
                   else FeedForward(d, hidden))
            self.blocks.append(Block(d, cfg.heads, ffn))
        self.apply(init_weights)
        nn.init.trunc_normal_(self.cls_token, std=0.02, a=-0.04, b=0.04)
        nn.init.trunc_normal_(self.pos_embed, std=0.02, a=-0.04, b=0.04)

    def set_input_stats(self, mean: float, std: float) -> None:
        if not std > 0:
            raise ValueError(f"pixel std must be positive, got {std}")
        self.pixel_mean.fill_(float(mean))
        self.pixel_std.fill_(float(std))

    @property
    def moe_layers(self) -> dict[int, MoEFeedForward]:
        """1-based layer index -> MoE module."""
        return {i + 1: blk.ffn for i, blk in enumerate(self.blocks) if isinstance(blk.ffn, MoEFeedForward)}

    def embed(self, patches: torch.Tensor, use_positional: bool = True,
              keep: torch.Tensor | None = None) -> torch.Tensor:
        """Project ``(B, n, patch_dim)`` patches and prepend the classification token.

        ``keep`` gives, per batch row, the original patch indices of the ``n``
        supplied patches (used by masked modeling to pick positional rows).
        """
        if patches.shape[-1] != self.cfg.patch_dim:
            raise ValueError(f"patch dim {patches.shape[-1]} != {self.cfg.patch_dim}")
        b, n, _ = patches.shape
        x = self.patch_embed((patches - self.pixel_mean) / self.pixel_std)
        cls = self.cls_token.expand(b, -1, -1)
        if use_positional:
            pos = self.pos_embed[:, 1:, :].expand(b, -1, -1)
            if keep is not None:
                pos = torch.gather(pos, 1, keep.unsqueeze(-1).expand(-1, -1, x.shape[-1]))
            elif n != self.cfg.num_patches:
                raise ValueError(f"{n} patches without index map, expected {self.cfg.num_patches}")
            x = x + pos
            cls = cls + self.pos_embed[:, :1, :]
        return torch.cat([cls, x], dim=1)

    def encode(self, tokens: torch.Tensor, task: TaskId, dropout_mask: np.ndarray | None = None) -> torch.Tensor:
        """Run every block. ``dropout_mask`` is ``(n_moe_layers, K)`` boolean or None."""
        if tokens.shape[-1] != self.cfg.width:
            raise ValueError(f"token width {tokens.shape[-1]} != {self.cfg.width}")
        x = tokens
        moe_row = 0
        for i, blk in enumerate(self.blocks):
            active = None
            if isinstance(blk.ffn, MoEFeedForward):
                if dropout_mask is not None:
                    active = dropout_mask[moe_row]
                moe_row += 1
            x = blk(x, task, active)
            if not torch.isfinite(x).all():
                raise NumericError(i + 1)
        return x

    def forward(self, patches, task, use_positional=True, keep=None, dropout_mask=None):
        return self.encode(self.embed(patches, use_positional, keep), task, dropout_mask)

    def record_attention(self, flag: bool = True) -> None:
        for blk in self.blocks:
            blk.attn.record = flag


def fill_missing_grads(module: nn.Module) -> None:
    """Give parameters the loss never reached an explicit zero gradient."""
    for p in module.parameters():
        if p.grad is None:
            p.grad = torch.zeros_like(p)


def backward(loss: torch.Tensor, module: nn.Module) -> dict[str, torch.Tensor]:
    """Backpropagate ``loss`` and return a name -> gradient map covering every parameter."""
    if not isinstance(loss, torch.Tensor) or loss.grad_fn is None:
        raise RuntimeError("backward called without a recorded forward pass")
    loss.backward()
    fill_missing_grads(module)
    return {name: p.grad for name, p in module.named_parameters()}


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())

