"""Domain containers shared across the package.

Images travel as plain ``numpy`` arrays shaped ``[C, H, W]`` (or torch
tensors inside the training graph); the helpers here validate them. Mask
sets and gradient-check reports get small frozen dataclasses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when array shapes do not satisfy an operation's contract."""


def check_image(img, *, name: str = "image", min_size: int = 8, multiple_of: int = 8) -> np.ndarray:
    """Validate a ``[C, H, W]`` image and return it as a float array.

    ``C`` must be 1 or 3, both spatial dims at least ``min_size`` and
    divisible by ``multiple_of``; every entry must be finite.
    """
    arr = np.asarray(img)
    if arr.ndim != 3:
        raise ShapeError(f"{name} must be [C, H, W], got shape {arr.shape}")
    c, h, w = arr.shape
    if c not in (1, 3):
        raise ShapeError(f"{name} must have 1 or 3 channels, got {c}")
    if h < min_size or w < min_size:
        raise ShapeError(f"{name} spatial size {h}x{w} below minimum {min_size}")
    if multiple_of > 1 and (h % multiple_of or w % multiple_of):
        raise ShapeError(f"{name} spatial size {h}x{w} not divisible by {multiple_of}")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_same_shape(a, b) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


@dataclass(frozen=True)
class MaskSet:
    """A stack of ``N`` binary object masks shaped ``[N, H, W]``.

    Masks may overlap and need not cover the image.
    """

    masks: np.ndarray
    source: str = "unknown"
    areas: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        m = np.asarray(self.masks)
        if m.ndim != 3:
            raise ShapeError(f"masks must be [N, H, W], got {m.shape}")
        if m.shape[0] < 1:
            raise ValueError("a MaskSet needs at least one mask")
        if m.dtype != bool:
            if not np.isin(m, (0, 1)).all():
                raise ValueError("masks must be {0,1}-valued")
            m = m.astype(bool)
        m = m.copy()
        m.setflags(write=False)
        areas = m.reshape(m.shape[0], -1).sum(axis=1).astype(np.int64)
        areas.setflags(write=False)
        object.__setattr__(self, "masks", m)
        object.__setattr__(self, "areas", areas)

    @property
    def n(self) -> int:
        return self.masks.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.masks.shape[1], self.masks.shape[2]

    def __eq__(self, other):
        if not isinstance(other, MaskSet):
            return NotImplemented
        return self.masks.shape == other.masks.shape and bool(np.array_equal(self.masks, other.masks))

    __hash__ = None


@dataclass(frozen=True)
class GradCheckReport:
    param_name: str
    max_rel_error: float
    passed: bool
    threshold: float = 1e-3
