from __future__ import annotations

import numpy as np


def nearest_indices(src: int, dst: int) -> np.ndarray:
    """Source index sampled by each of ``dst`` output positions (floor rule)."""
    return (np.arange(dst) * src) // dst


def resize_mask(mask, h: int, w: int) -> np.ndarray:
    """Nearest-neighbour resize of a binary ``[H, W]`` (or ``[N, H, W]``) mask."""
    if h < 1 or w < 1:
        raise ValueError(f"target size must be positive, got {h}x{w}")
    m = np.asarray(mask)
    rows = nearest_indices(m.shape[-2], h)
    cols = nearest_indices(m.shape[-1], w)
    return m[..., rows[:, None], cols[None, :]].astype(bool)
