"""PNG image and mask-set files.

Images: 8- or 16-bit PNG, decoded to [0, 1] by dividing by ``2**bits - 1``.

Mask sets are written as ``<stem>.mask.png`` with a ``<stem>.mask.json``
manifest ``{n, areas, source, encoding}``:

* ``encoding: "label"`` (masks disjoint): single-channel uint16 label map,
  pixel value ``k`` in ``1..N`` means mask ``k-1``, 0 is background.
* ``encoding: "pages"`` (masks overlap): the ``N`` binary pages stacked
  vertically into one ``[N*H, W]`` uint8 PNG (0 or 255); the manifest also
  records ``height``.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import cv2
import numpy as np

from .types import MaskSet


def read_image(path) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FileNotFoundError(f"cannot decode image {path}")
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise ValueError(f"unsupported PNG dtype {raw.dtype} in {path}")
    img = raw.astype(np.float64) / scale
    if img.ndim == 2:
        return img[None]
    if img.shape[2] == 4:
        img = img[:, :, :3]
    return np.ascontiguousarray(img[:, :, ::-1].transpose(2, 0, 1))


def quantize(img, bits: int = 8) -> np.ndarray:
    """Round a [0, 1] image to the grid a ``bits``-bit PNG can store."""
    top = 2**bits - 1
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * top) / top


def write_image(path, img, bits: int = 8) -> None:
    img = np.asarray(img, dtype=np.float64)
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    dtype = np.uint8 if bits == 8 else np.uint16
    raw = np.round(np.clip(img, 0.0, 1.0) * (2**bits - 1)).astype(dtype)
    if raw.shape[0] == 1:
        raw = raw[0]
    else:
        raw = np.ascontiguousarray(raw.transpose(1, 2, 0)[:, :, ::-1])
    _atomic_imwrite(path, raw)


def _atomic_imwrite(path, raw) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp.png")
    if not cv2.imwrite(str(tmp), raw):
        raise OSError(f"failed to write {path}")
    os.replace(tmp, path)


def mask_paths(directory, stem: str) -> tuple[Path, Path]:
    d = Path(directory)
    return d / f"{stem}.mask.png", d / f"{stem}.mask.json"


def write_maskset(directory, stem: str, masks: MaskSet) -> tuple[Path, Path]:
    png, meta = mask_paths(directory, stem)
    m = masks.masks
    n, h, w = m.shape
    overlapping = bool((m.sum(axis=0) > 1).any())
    if overlapping:
        raw = (m.reshape(n * h, w).astype(np.uint8)) * 255
        encoding = "pages"
    else:
        if n > 65535:
            raise ValueError("label maps hold at most 65535 masks")
        raw = np.zeros((h, w), dtype=np.uint16)
        for k in range(n):
            raw[m[k]] = k + 1
        encoding = "label"
    _atomic_imwrite(png, raw)
    manifest = {
        "n": int(n),
        "areas": [int(a) for a in masks.areas],
        "source": masks.source,
        "encoding": encoding,
        "height": int(h),
    }
    meta.write_text(json.dumps(manifest, indent=2))
    return png, meta


def read_maskset(directory, stem: str) -> MaskSet:
    png, meta = mask_paths(directory, stem)
    if not png.exists():
        raise FileNotFoundError(f"no mask file {png}")
    raw = cv2.imread(str(png), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FileNotFoundError(f"cannot decode mask file {png}")
    info = json.loads(meta.read_text()) if meta.exists() else {}
    source = info.get("source", "precomputed")
    if info.get("encoding") == "pages":
        n, h = int(info["n"]), int(info["height"])
        return MaskSet(raw.reshape(n, h, raw.shape[1]) > 0, source=source)
    if raw.ndim != 2:
        raise ValueError(f"label map {png} must be single-channel")
    n = int(info.get("n", raw.max()))
    labels = np.arange(1, n + 1, dtype=raw.dtype)[:, None, None]
    return MaskSet(raw[None] == labels, source=source)
