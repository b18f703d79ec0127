"""Mask sources standing in for an automatic-mode segment-anything model.

Masks are constants in the training graph, so any deterministic source
exercises the same distillation mechanics. ``precomputed`` loads masks
written by an external segmentation run (see :mod:`samdistill.core.io`).
"""

from __future__ import annotations

import os
import threading
from pathlib import Path
from dataclasses import dataclass, field

import numpy as np

from .core.io import read_maskset
from .core.types import MaskSet

KINDS = ("grid", "luminance", "precomputed")
CACHE_ENV = "SAMDISTILL_CACHE"


def default_mask_dir() -> str | None:
    """``$SAMDISTILL_CACHE/masks`` when the variable is set."""
    root = os.environ.get(CACHE_ENV)
    return str(Path(root) / "masks") if root else None


class MissingMaskError(FileNotFoundError):
    """No precomputed mask file exists for the requested image id."""


@dataclass
class SegmenterConfig:
    kind: str = "luminance"
    rows: int = 2
    cols: int = 2
    n_bins: int = 4
    mask_dir: str | None = None
    n_max: int = 8
    refresh_interval: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown segmenter kind {self.kind!r}; expected one of {KINDS}")
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid rows and cols must be >= 1")
        if self.n_bins < 2:
            raise ValueError("n_bins must be >= 2")
        if self.n_max < 2:
            raise ValueError("n_max must be >= 2")
        if self.refresh_interval < 1:
            raise ValueError("refresh_interval must be >= 1")
        if self.kind == "precomputed" and not self.mask_dir:
            self.mask_dir = default_mask_dir()
            if not self.mask_dir:
                raise ValueError(f"precomputed segmenter needs mask_dir (or ${CACHE_ENV})")


def canonicalize(masks: MaskSet, n_max: int) -> MaskSet:
    """Drop empty masks, order by area (descending) then by first set pixel, keep ``n_max``."""
    if n_max < 2:
        raise ValueError("n_max must be >= 2")
    m = masks.masks
    flat = m.reshape(m.shape[0], -1)
    areas = flat.sum(axis=1)
    keep = np.flatnonzero(areas > 0)
    if keep.size == 0:
        raise ValueError("every mask is empty")
    first = flat[keep].argmax(axis=1)
    order = keep[np.lexsort((first, -areas[keep]))][:n_max]
    return MaskSet(m[order], source=masks.source)


def luminance(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.shape[0] == 1:
        return img[0]
    return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]


class Segmenter:
    """Base interface: ``segment(img, image_id=None) -> MaskSet`` (canonicalized).

    ``calls`` counts invocations on every subclass, for instrumentation.
    """

    calls = 0
    _calls_lock = threading.Lock()

    def __init__(self, cfg: SegmenterConfig):
        self.cfg = cfg

    def segment(self, img, image_id: str | None = None) -> MaskSet:
        with Segmenter._calls_lock:
            Segmenter.calls += 1
        return canonicalize(self._raw(np.asarray(img), image_id), self.cfg.n_max)

    __call__ = segment

    def _raw(self, img: np.ndarray, image_id: str | None) -> MaskSet:
        raise NotImplementedError


class GridSegmenter(Segmenter):
    def _raw(self, img, image_id=None):
        _, h, w = img.shape
        ys = np.linspace(0, h, self.cfg.rows + 1).round().astype(int)
        xs = np.linspace(0, w, self.cfg.cols + 1).round().astype(int)
        masks = np.zeros((self.cfg.rows * self.cfg.cols, h, w), dtype=bool)
        for r in range(self.cfg.rows):
            for c in range(self.cfg.cols):
                masks[r * self.cfg.cols + c, ys[r] : ys[r + 1], xs[c] : xs[c + 1]] = True
        return MaskSet(masks, source="grid")


class LuminanceSegmenter(Segmenter):
    """One mask per luminance quantile bin; bins left empty by ties are dropped."""

    def _raw(self, img, image_id=None):
        y = luminance(img)
        inner = np.quantile(y, np.arange(1, self.cfg.n_bins) / self.cfg.n_bins)
        bins = np.searchsorted(inner, y, side="right")
        masks = bins[None] == np.arange(self.cfg.n_bins)[:, None, None]
        return MaskSet(masks, source="luminance")


class PrecomputedSegmenter(Segmenter):
    """Loads ``<mask_dir>/<image_id>.mask.png``; results are cached per id."""

    def __init__(self, cfg: SegmenterConfig):
        super().__init__(cfg)
        self._cache: dict[str, MaskSet] = {}
        self._lock = threading.Lock()

    def _raw(self, img, image_id=None):
        if image_id is None:
            raise MissingMaskError("precomputed segmenter needs an image id")
        with self._lock:
            masks = self._cache.get(image_id)
        if masks is None:
            try:
                masks = read_maskset(self.cfg.mask_dir, image_id)
            except FileNotFoundError as exc:
                raise MissingMaskError(f"no precomputed masks for {image_id!r} in {self.cfg.mask_dir}") from exc
            with self._lock:
                self._cache[image_id] = masks
        if masks.shape != img.shape[1:]:
            raise ValueError(f"masks for {image_id!r} are {masks.shape}, image is {img.shape[1:]}")
        return masks


@dataclass
class CachedSegmenter:
    """Reuses masks per image id for ``refresh_interval`` steps."""

    inner: Segmenter
    refresh_interval: int = 1
    _cache: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def segment(self, img, image_id: str | None = None, step: int = 0) -> MaskSet:
        if image_id is None or self.refresh_interval <= 1:
            return self.inner.segment(img, image_id)
        key = (image_id, step // self.refresh_interval)
        with self._lock:
            hit = self._cache.get(key)
        if hit is None:
            hit = self.inner.segment(img, image_id)
            with self._lock:
                self._cache = {k: v for k, v in self._cache.items() if k[1] == key[1]}
                self._cache[key] = hit
        return hit


_REGISTRY = {"grid": GridSegmenter, "luminance": LuminanceSegmenter, "precomputed": PrecomputedSegmenter}


def make_segmenter(cfg: SegmenterConfig) -> Segmenter:
    return _REGISTRY[cfg.kind](cfg)


def segment(img, cfg: SegmenterConfig, image_id: str | None = None) -> MaskSet:
    return make_segmenter(cfg).segment(img, image_id)
