"""Restoration networks: the plain residual student and the mask-fusing refiner."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core.masks import resize_mask
from .core.types import MaskSet


@dataclass
class BaselineIRConfig:
    channels: int = 32
    n_blocks: int = 4
    in_channels: int = 3

    def __post_init__(self):
        if self.channels < 8:
            raise ValueError("channels must be >= 8")
        if self.n_blocks < 2:
            raise ValueError("n_blocks must be >= 2")
        if self.in_channels not in (1, 3):
            raise ValueError("in_channels must be 1 or 3")


@dataclass
class SPFUnitConfig:
    hidden_channels: int = 16
    attention: bool = True

    def __post_init__(self):
        if self.hidden_channels < 8:
            raise ValueError("hidden_channels must be >= 8")


@dataclass
class RefinerConfig:
    channels: int = 16
    n_blocks: int = 2
    mask_channels: int = 8
    in_channels: int = 3
    spf: SPFUnitConfig = field(default_factory=SPFUnitConfig)

    def __post_init__(self):
        if isinstance(self.spf, dict):
            self.spf = SPFUnitConfig(**self.spf)
        if self.channels < 8:
            raise ValueError("channels must be >= 8")
        if self.n_blocks < 2:
            raise ValueError("n_blocks must be >= 2")
        if self.mask_channels < 2:
            raise ValueError("mask_channels must be >= 2")


def conv3x3(cin: int, cout: int) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, padding=1)


class ConvBlock(nn.Sequential):
    """3x3 conv followed by ReLU."""

    def __init__(self, cin: int, cout: int):
        super().__init__(conv3x3(cin, cout), nn.ReLU(inplace=False))


def _zero_(conv: nn.Conv2d) -> None:
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)


class BaselineIR(nn.Module):
    """Residual conv net: ``out = x + tail(blocks(head(x)))``; tail starts at zero."""

    def __init__(self, cfg: BaselineIRConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or BaselineIRConfig()
        self.head = ConvBlock(cfg.in_channels, cfg.channels)
        self.blocks = nn.ModuleList(ConvBlock(cfg.channels, cfg.channels) for _ in range(cfg.n_blocks))
        self.tail = conv3x3(cfg.channels, cfg.in_channels)
        _zero_(self.tail)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        f = self.head(x)
        for block in self.blocks:
            f = block(f)
        return x + self.tail(f)


def baseline_forward(model: BaselineIR, lq: torch.Tensor) -> torch.Tensor:
    squeeze = lq.dim() == 3
    out = model(lq[None] if squeeze else lq)
    return out[0] if squeeze else out


def pack_masks(masks: MaskSet, n_max: int, h: int | None = None, w: int | None = None) -> np.ndarray:
    """Fixed-width ``[n_max, h, w]`` float encoding; unused channels are zero."""
    if masks.n > n_max:
        raise ValueError(f"{masks.n} masks exceed n_max={n_max}; canonicalize first")
    H, W = masks.shape
    h, w = h or H, w or W
    out = np.zeros((n_max, h, w))
    out[: masks.n] = resize_mask(masks.masks, h, w)
    return out


def resize_features(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def resize_packed_masks(m: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Nearest resize of ``[..., H, W]`` masks using the same index rule as ``resize_mask``."""
    H, W = m.shape[-2:]
    h, w = size
    if (H, W) == (h, w):
        return m
    rows = torch.arange(h) * H // h
    cols = torch.arange(w) * W // w
    return m[..., rows[:, None], cols[None, :]]


class SPFUnit(nn.Module):
    """Fuses a carried feature map with the current block's features under mask gating.

    ``concat(resize(f_in), f_block) -> conv block -> conv block``; when
    attention is on, the result is multiplied by
    ``sigmoid(conv1x1(resize(masks)))``.
    """

    def __init__(self, in_channels: int, block_channels: int, mask_channels: int, cfg: SPFUnitConfig):
        super().__init__()
        self.in_channels = in_channels
        self.block_channels = block_channels
        self.mask_channels = mask_channels
        self.attention = cfg.attention
        self.fuse = nn.Sequential(
            ConvBlock(in_channels + block_channels, cfg.hidden_channels),
            ConvBlock(cfg.hidden_channels, block_channels),
        )
        self.gate = nn.Conv2d(mask_channels, block_channels, 1)
        self.calls = 0

    def forward(self, f_in: torch.Tensor, f_block: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
        if f_in.shape[1] != self.in_channels or f_block.shape[1] != self.block_channels:
            raise ValueError(
                f"SPF unit expects {self.in_channels}+{self.block_channels} channels, "
                f"got {f_in.shape[1]}+{f_block.shape[1]}"
            )
        if masks.shape[1] != self.mask_channels:
            raise ValueError(f"SPF unit expects {self.mask_channels} mask channels, got {masks.shape[1]}")
        self.calls += 1
        size = tuple(f_block.shape[-2:])
        fused = self.fuse(torch.cat([resize_features(f_in, size), f_block], dim=1))
        if not self.attention:
            return fused
        gate = torch.sigmoid(self.gate(resize_packed_masks(masks, size)))
        return fused * gate


class Refiner(nn.Module):
    """Second-stage restorer with one SPF unit per building block.

    The first unit fuses ``concat(I_hq1, masks)`` with the first block's
    output; every later unit fuses the previous unit's output with the
    current block's output. The next block consumes the fused features.
    """

    forward_calls = 0

    def __init__(self, cfg: RefinerConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or RefinerConfig()
        c = cfg.channels
        self.head = ConvBlock(cfg.in_channels, c)
        self.blocks = nn.ModuleList(ConvBlock(c, c) for _ in range(cfg.n_blocks))
        units = [SPFUnit(cfg.in_channels + cfg.mask_channels, c, cfg.mask_channels, cfg.spf)]
        units += [SPFUnit(c, c, cfg.mask_channels, cfg.spf) for _ in range(cfg.n_blocks - 1)]
        self.spf = nn.ModuleList(units)
        self.tail = conv3x3(c, cfg.in_channels)
        _zero_(self.tail)

    def forward(self, x: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
        Refiner.forward_calls += 1
        masks = masks.to(x.dtype)
        carried = torch.cat([x, resize_packed_masks(masks, tuple(x.shape[-2:]))], dim=1)
        f = self.head(x)
        for block, unit in zip(self.blocks, self.spf):
            carried = unit(carried, block(f), masks)
            f = carried
        return x + self.tail(f)


def refiner_forward(model: Refiner, hq1: torch.Tensor, masks: MaskSet | torch.Tensor) -> torch.Tensor:
    squeeze = hq1.dim() == 3
    x = hq1[None] if squeeze else hq1
    if isinstance(masks, MaskSet):
        packed = torch.from_numpy(pack_masks(masks, model.cfg.mask_channels, *x.shape[-2:]))[None]
    else:
        packed = masks[None] if masks.dim() == 3 else masks
    out = model(x, packed.to(x.dtype))
    return out[0] if squeeze else out
