"""Distillation losses from the refiner (teacher) to the baseline (student).

* ``smooth_l1``: image-level distillation.
* ``perceptual_features`` / ``mask_guided_features`` / ``relation_matrix`` /
  ``sgr_loss``: relation-level distillation over mask-gated features of a
  frozen stride-8 extractor.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .models import resize_packed_masks

log = logging.getLogger(__name__)

DEGENERATE_EPS = 1e-8

# conv widths per stage; "M" is a 2x2 max-pool
ARCHS = {
    # torchvision vgg16 ``features[:23]`` (conv1_1 .. relu4_3)
    "vgg16": [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512],
    "slim": [16, "M", 32, "M", 64, "M", 512],
}

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def smooth_l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise smooth L1 (threshold 1), averaged over all elements.

    ``0.5 d**2`` for ``|d| <= 1`` and ``|d| - 0.5`` beyond.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    d = (a - b).abs()
    return torch.where(d <= 1.0, 0.5 * d * d, d - 0.5).mean()


@dataclass
class PerceptualConfig:
    kind: str = "fixed_random"
    out_channels: int = 512
    stride: int = 8
    weights_path: str | None = None
    seed: int = 0
    arch: str | None = None

    def __post_init__(self):
        if self.kind not in ("pretrained", "fixed_random"):
            raise ValueError(f"unknown perceptual kind {self.kind!r}")
        if self.out_channels != 512 or self.stride != 8:
            raise ValueError("perceptual features are fixed at 512 channels, stride 8")
        if self.arch is None:
            self.arch = "vgg16" if self.kind == "pretrained" else "slim"
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}; expected one of {sorted(ARCHS)}")
        if self.kind == "pretrained" and self.arch != "vgg16":
            raise ValueError("pretrained weights are only defined for arch 'vgg16'")


class PerceptualExtractor(nn.Module):
    """Frozen VGG-style stack of 3x3 conv+ReLU stages with three max-pools.

    Parameters never require grad; gradients still flow to the input.
    Layer names follow torchvision's ``features.<index>`` numbering so a
    vgg16 state dict loads directly.
    """

    def __init__(self, cfg: PerceptualConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or PerceptualConfig()
        layers, cin = [], 3
        for item in ARCHS[cfg.arch]:
            if item == "M":
                layers.append(nn.MaxPool2d(2, 2))
            else:
                layers += [nn.Conv2d(cin, item, 3, padding=1), nn.ReLU(inplace=False)]
                cin = item
        self.features = nn.Sequential(*layers)
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))

        if cfg.kind == "pretrained":
            self._load(cfg.weights_path)
        else:
            self._seeded_init(cfg.seed)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def _seeded_init(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for m in self.features:
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * 9
                with torch.no_grad():
                    m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                    m.bias.zero_()

    def _load(self, path) -> None:
        if not path or not Path(path).exists():
            raise FileNotFoundError(f"pretrained perceptual weights not found: {path!r}")
        state = torch.load(path, map_location="cpu", weights_only=True)
        if "state_dict" in state:
            state = state["state_dict"]
        n = len(self.features)
        wanted = {k: v for k, v in state.items() if k.startswith("features.") and int(k.split(".")[1]) < n}
        missing = self.load_state_dict(wanted, strict=False).missing_keys
        missing = [k for k in missing if k.startswith("features.")]
        if missing:
            raise KeyError(f"weights file {path} lacks layers {missing}")

    def train(self, mode: bool = True):
        # always stays in eval mode
        return super().train(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] % 8 or x.shape[-2] % 8:
            raise ValueError(f"spatial size {tuple(x.shape[-2:])} not divisible by 8")
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        return self.features(x)


def perceptual_features(img: torch.Tensor, extractor: PerceptualExtractor) -> torch.Tensor:
    """``[C, H, W]`` or ``[B, C, H, W]`` image to ``512 x H/8 x W/8`` features."""
    squeeze = img.dim() == 3
    out = extractor(img[None] if squeeze else img)
    return out[0] if squeeze else out


def mask_guided_features(feat: torch.Tensor, masks_low: torch.Tensor) -> torch.Tensor:
    """Gate ``[C, h, w]`` features by each of ``[N, h, w]`` masks: ``[N, C, h, w]``."""
    if tuple(feat.shape[-2:]) != tuple(masks_low.shape[-2:]):
        raise ValueError(f"mask size {tuple(masks_low.shape[-2:])} != feature size {tuple(feat.shape[-2:])}")
    return feat[None] * masks_low[:, None].to(feat.dtype)


class DegenerateRelationError(ValueError):
    """Fewer than two masked features carry any signal."""


def vectorize(masked: torch.Tensor, masks_low: torch.Tensor | None = None, mode: str = "flatten") -> torch.Tensor:
    """Turn ``[N, C, h, w]`` masked features into ``[N, D]`` vectors.

    ``flatten`` keeps every channel and position. ``pool`` averages each
    channel over the mask support, giving one ``C``-vector per mask.
    """
    n = masked.shape[0]
    if mode == "flatten":
        return masked.reshape(n, -1)
    if mode == "pool":
        if masks_low is None:
            raise ValueError("pool mode needs the masks")
        area = masks_low.reshape(n, -1).sum(dim=1).clamp_min(1).to(masked.dtype)
        return masked.sum(dim=(-2, -1)) / area[:, None]
    raise ValueError(f"unknown vectorize mode {mode!r}")


def relation_matrix(vectors: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine similarity of ``[N, D]`` vectors (or ``[N, C, h, w]`` features, flattened).

    The result is exactly symmetric.
    """
    v = vectors.reshape(vectors.shape[0], -1)
    norms = v.norm(dim=1)
    if int((norms > DEGENERATE_EPS).sum()) < 2 or v.shape[0] < 2:
        raise DegenerateRelationError("need at least two non-degenerate masked features")
    if bool((norms <= DEGENERATE_EPS).any()):
        raise DegenerateRelationError("degenerate (all-zero) masked feature; drop it first")
    unit = v / norms[:, None]
    r = unit @ unit.T
    return 0.5 * (r + r.T)


def sgr_loss(r1: torch.Tensor, r2: torch.Tensor, distance: str = "abs") -> torch.Tensor:
    """Mean per-pair distance over the ``N**2 - N`` off-diagonal entries.

    ``distance="abs"`` uses ``|r1 - r2|``; ``"squared"`` uses ``(r1 - r2)**2``.
    """
    if r1.shape != r2.shape:
        raise ValueError(f"relation sizes differ: {tuple(r1.shape)} vs {tuple(r2.shape)}")
    n = r1.shape[0]
    if n < 2:
        raise ValueError("relation matrices need N >= 2")
    off = ~torch.eye(n, dtype=torch.bool, device=r1.device)
    diff = (r1 - r2)[off]
    if distance == "abs":
        per_pair = diff.abs()
    elif distance == "squared":
        per_pair = diff * diff
    else:
        raise ValueError(f"unknown distance {distance!r}")
    return per_pair.sum() / (n * n - n)


@dataclass
class DistillLosses:
    spd: torch.Tensor
    sgr: torch.Tensor
    sgr_skips: int = 0


def sample_sgr(f1, f2, masks_low, mode: str = "flatten", distance: str = "abs"):
    """SGR loss for one sample, or ``None`` when fewer than two masks survive.

    A mask is kept only if its gated features are non-degenerate in both images.
    """
    m1 = mask_guided_features(f1, masks_low)
    m2 = mask_guided_features(f2, masks_low)
    v1 = vectorize(m1, masks_low, mode)
    v2 = vectorize(m2, masks_low, mode)
    with torch.no_grad():
        keep = (masks_low.reshape(masks_low.shape[0], -1).sum(1) > 0)
        keep &= (v1.norm(dim=1) > DEGENERATE_EPS) & (v2.norm(dim=1) > DEGENERATE_EPS)
    if int(keep.sum()) < 2:
        return None
    return sgr_loss(relation_matrix(v1[keep]), relation_matrix(v2[keep]), distance)


def spd_sgr_losses(
    hq1: torch.Tensor,
    hq2: torch.Tensor,
    masks: torch.Tensor,
    extractor: PerceptualExtractor | None,
    *,
    mode: str = "flatten",
    distance: str = "abs",
    with_spd: bool = True,
    with_sgr: bool = True,
    reduce: bool = True,
) -> DistillLosses:
    """Image-level and relation-level distillation losses for a batch.

    ``hq1`` is the student output ``[B, C, H, W]``; ``hq2`` the teacher
    output, which is detached here so no gradient reaches the teacher.
    ``masks`` are packed ``[B, K, H, W]`` masks from the student output;
    all-zero channels count as absent. Samples with fewer than two usable
    masks contribute zero and are counted in ``sgr_skips``. ``reduce=False``
    returns per-sample ``[B]`` losses instead of batch means.
    """
    teacher = hq2.detach()
    zero = hq1.new_zeros(()) if reduce else hq1.new_zeros(hq1.shape[0])
    if not with_spd:
        spd = zero
    elif reduce:
        spd = smooth_l1(hq1, teacher)
    else:
        spd = torch.stack([smooth_l1(a, b) for a, b in zip(hq1, teacher)])
    if not with_sgr:
        return DistillLosses(spd, zero, 0)

    f1 = perceptual_features(hq1, extractor)
    with torch.no_grad():
        f2 = perceptual_features(teacher, extractor)
    low = resize_packed_masks(masks.to(f1.dtype), tuple(f1.shape[-2:]))

    terms, skips = [], 0
    for b in range(hq1.shape[0]):
        term = sample_sgr(f1[b], f2[b], low[b], mode, distance)
        if term is None:
            skips += 1
            log.debug("sample %d: fewer than two usable masks, skipping relation loss", b)
            terms.append(hq1.new_zeros(()))
        else:
            terms.append(term)
    terms = torch.stack(terms)
    return DistillLosses(spd, terms.mean() if reduce else terms, skips)


def frozen_fingerprint(module: nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


__all__ = [
    "ARCHS",
    "DegenerateRelationError",
    "DistillLosses",
    "PerceptualConfig",
    "PerceptualExtractor",
    "frozen_fingerprint",
    "mask_guided_features",
    "perceptual_features",
    "relation_matrix",
    "sample_sgr",
    "sgr_loss",
    "smooth_l1",
    "spd_sgr_losses",
    "vectorize",
]
