"""Synthetic paired degradations and the on-disk dataset manifest.

Every degradation is a pure function of ``(image, spec)``; randomness comes
only from ``spec.seed``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core.io import quantize, read_image, write_image
from .core.metrics import psnr
from .core.types import ShapeError, check_image

log = logging.getLogger(__name__)

KINDS = ("rain", "blur", "noise")

DEFAULT_PARAMS = {
    "rain": {"streak_count": 120, "length": 14.0, "angle": 70.0, "intensity": 0.6},
    "blur": {"sigma": 1.5, "kernel_size": 7},
    "noise": {"sigma": 0.1},
}


@dataclass(frozen=True)
class DegradationSpec:
    kind: str = "rain"
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown degradation kind {self.kind!r}; expected one of {KINDS}")
        unknown = set(self.params) - set(DEFAULT_PARAMS[self.kind])
        if unknown:
            raise ValueError(f"unknown {self.kind} params {sorted(unknown)}; valid: {sorted(DEFAULT_PARAMS[self.kind])}")
        merged = {**DEFAULT_PARAMS[self.kind], **self.params}
        object.__setattr__(self, "params", merged)
        p = merged
        if self.kind == "rain":
            if int(p["streak_count"]) < 0:
                raise ValueError("streak_count must be >= 0")
            if not 0.0 <= p["intensity"] <= 1.0:
                raise ValueError("intensity must lie in [0, 1]")
            if p["length"] <= 0:
                raise ValueError("length must be positive")
        elif self.kind == "blur":
            k = int(p["kernel_size"])
            if k < 3 or k % 2 == 0:
                raise ValueError("kernel_size must be odd and >= 3")
            if p["sigma"] <= 0:
                raise ValueError("sigma must be positive")
        elif p["sigma"] <= 0:
            raise ValueError("sigma must be positive")

    def with_seed(self, seed: int) -> "DegradationSpec":
        return replace(self, seed=int(seed))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params), "seed": int(self.seed)}

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationSpec":
        return cls(kind=d["kind"], params=dict(d.get("params", {})), seed=int(d.get("seed", 0)))


def _require(spec: DegradationSpec, kind: str) -> None:
    if spec.kind != kind:
        raise ValueError(f"expected a {kind} spec, got {spec.kind}")


def _line_kernel(length: int, angle_deg: float) -> np.ndarray:
    size = length if length % 2 else length + 1
    k = np.zeros((size, size))
    c = size // 2
    theta = math.radians(angle_deg)
    for t in np.linspace(-c, c, 4 * size):
        y = int(round(c - t * math.sin(theta)))
        x = int(round(c + t * math.cos(theta)))
        k[y, x] = 1.0
    return k / k.sum()


def add_rain_streaks(img, spec: DegradationSpec) -> np.ndarray:
    """Add white oriented streaks, motion-blurred along their direction."""
    _require(spec, "rain")
    img = np.asarray(img, dtype=np.float64)
    p = spec.params
    count = int(p["streak_count"])
    if count == 0:
        return img.copy()
    rng = np.random.default_rng(spec.seed)
    _, h, w = img.shape
    theta = math.radians(p["angle"])
    dy, dx = -math.sin(theta), math.cos(theta)

    layer = np.zeros((h, w))
    for _ in range(count):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        length = p["length"] * rng.uniform(0.6, 1.4)
        brightness = rng.uniform(0.5, 1.0)
        t = np.linspace(-length / 2, length / 2, max(int(2 * length), 2))
        profile = brightness * np.exp(-0.5 * (t / (length / 4)) ** 2)
        ys = np.round(cy + t * dy).astype(int)
        xs = np.round(cx + t * dx).astype(int)
        keep = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
        np.maximum.at(layer, (ys[keep], xs[keep]), profile[keep])

    blur_len = max(3, int(round(p["length"] / 3)))
    layer = ndimage.convolve(layer, _line_kernel(blur_len, p["angle"]), mode="constant")
    peak = layer.max()
    if peak > 0:
        layer = layer / peak
    return np.clip(img + p["intensity"] * layer[None], 0.0, 1.0)


def gaussian_kernel1d(sigma: float, kernel_size: int) -> np.ndarray:
    ax = np.arange(kernel_size, dtype=np.float64) - kernel_size // 2
    g = np.exp(-(ax**2) / (2 * sigma**2))
    return g / g.sum()


def gaussian_blur(img, spec: DegradationSpec) -> np.ndarray:
    """Separable Gaussian blur per channel with symmetric (reflect) borders."""
    _require(spec, "blur")
    img = np.asarray(img, dtype=np.float64)
    k = int(spec.params["kernel_size"])
    if k > img.shape[-1] or k > img.shape[-2]:
        raise ShapeError(f"kernel size {k} exceeds image size {img.shape[-2]}x{img.shape[-1]}")
    g = gaussian_kernel1d(spec.params["sigma"], k)
    out = ndimage.convolve1d(img, g, axis=-1, mode="reflect")
    return ndimage.convolve1d(out, g, axis=-2, mode="reflect")


def add_gaussian_noise(img, spec: DegradationSpec) -> np.ndarray:
    _require(spec, "noise")
    img = np.asarray(img, dtype=np.float64)
    rng = np.random.default_rng(spec.seed)
    return np.clip(img + rng.normal(0.0, spec.params["sigma"], size=img.shape), 0.0, 1.0)


DEGRADATIONS = {"rain": add_rain_streaks, "blur": gaussian_blur, "noise": add_gaussian_noise}


def degrade(img, spec: DegradationSpec) -> np.ndarray:
    return DEGRADATIONS[spec.kind](img, spec)


def procedural_image(seed: int, size: int = 64, channels: int = 3) -> np.ndarray:
    """Value-noise texture with a few flat-coloured shapes on top."""
    rng = np.random.default_rng(seed)
    img = np.zeros((channels, size, size))
    amp, total = 1.0, 0.0
    for octave in range(1, 6):
        cells = 2**octave + 1
        grid = rng.random((channels, cells, cells))
        img += amp * ndimage.zoom(grid, (1, size / cells, size / cells), order=1)[:, :size, :size]
        total += amp
        amp *= 0.5
    img /= total
    img = 0.15 + 0.7 * (img - img.min()) / max(img.max() - img.min(), 1e-12)

    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(int(rng.integers(3, 7))):
        color = rng.uniform(0.05, 0.95, size=channels)[:, None]
        if rng.random() < 0.5:
            lo = min(8, size // 4)
            y0, x0 = rng.integers(0, size - lo, size=2)
            hh, ww = rng.integers(lo, max(size // 2, lo + 1), size=2)
            region = (yy >= y0) & (yy < y0 + hh) & (xx >= x0) & (xx < x0 + ww)
        else:
            cy, cx = rng.uniform(0, size, size=2)
            r = rng.uniform(min(5.0, size / 8), size / 4)
            region = (yy - cy) ** 2 + (xx - cx) ** 2 < r**2
        shade = 0.85 + 0.15 * img[:, region].mean(axis=0, keepdims=True)
        img[:, region] = color * shade
    return np.clip(img, 0.0, 1.0)


def load_clean_folder(folder, size: int | None = None) -> list[np.ndarray]:
    """Load user-supplied clean PNGs, center-cropped to a multiple of 8 (or ``size``)."""
    images = []
    for path in sorted(Path(folder).glob("*.png")):
        img = read_image(path)
        _, h, w = img.shape
        th = size or h - h % 8
        tw = size or w - w % 8
        if th > h or tw > w or th < 8 or tw < 8:
            log.warning("skipping %s: too small (%dx%d)", path, h, w)
            continue
        y0, x0 = (h - th) // 2, (w - tw) // 2
        images.append(img[:, y0 : y0 + th, x0 : x0 + tw])
    return images


@dataclass
class DatasetManifest:
    root: Path
    entries: list[dict]
    spec: DegradationSpec
    split: str = "train"
    version: int = 1

    def __post_init__(self):
        if self.split not in ("train", "val", "test"):
            raise ValueError(f"unknown split {self.split!r}")
        ids = [e["id"] for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate ids in manifest")

    def __len__(self):
        return len(self.entries)

    def to_dict(self) -> dict:
        return {"version": self.version, "split": self.split, "spec": self.spec.to_dict(), "entries": self.entries}

    def save(self, path=None) -> Path:
        path = Path(path) if path else self.root / "manifest.json"
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def load_arrays(self) -> tuple[np.ndarray, np.ndarray, list[str]]:
        """All pairs as float arrays ``[N, C, H, W]`` plus their ids."""
        lq = np.stack([read_image(self.resolve(e["lq_path"])) for e in self.entries])
        hq = np.stack([read_image(self.resolve(e["hq_path"])) for e in self.entries])
        return lq, hq, [e["id"] for e in self.entries]


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    d = json.loads(path.read_text())
    if d.get("version") != 1:
        raise ValueError(f"unsupported manifest version {d.get('version')}")
    m = DatasetManifest(
        root=path.parent,
        entries=list(d["entries"]),
        spec=DegradationSpec.from_dict(d["spec"]),
        split=d.get("split", "train"),
    )
    for e in m.entries:
        for key in ("lq_path", "hq_path"):
            if not m.resolve(e[key]).exists():
                raise FileNotFoundError(f"manifest entry {e['id']} references missing {e[key]}")
    return m


def generate_dataset(
    base_images: list,
    spec: DegradationSpec,
    count: int,
    out_root,
    split: str = "train",
    bits: int = 8,
) -> DatasetManifest:
    """Write ``count`` (lq, hq) PNG pairs and ``manifest.json`` under ``out_root``.

    Sample ``i`` degrades ``base_images[i % len(base_images)]`` with a seed
    derived from ``(spec.seed, i)``, so reruns reproduce every file.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if not base_images:
        raise ValueError("base image set is empty")
    root = Path(out_root)
    try:
        (root / "lq").mkdir(parents=True, exist_ok=True)
        (root / "hq").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write dataset under {root}: {exc}") from exc

    seeds = np.random.SeedSequence(spec.seed).generate_state(count, dtype=np.uint64)
    entries = []
    for i in range(count):
        hq = quantize(check_image(base_images[i % len(base_images)], name="base image"), bits)
        lq = quantize(degrade(hq, spec.with_seed(int(seeds[i]))), bits)
        sid = f"{split}_{i:05d}"
        entry = {"id": sid, "lq_path": f"lq/{sid}.png", "hq_path": f"hq/{sid}.png"}
        write_image(root / entry["lq_path"], lq, bits)
        write_image(root / entry["hq_path"], hq, bits)
        score = psnr(lq, hq)
        if spec.kind == "rain" and spec.params["intensity"] >= 0.3 and score >= 40.0:
            log.warning("sample %s barely degraded: psnr %.2f dB", sid, score)
        entries.append(entry)

    manifest = DatasetManifest(root=root, entries=entries, spec=spec, split=split)
    manifest.save()
    return manifest


def make_splits(
    out_root,
    spec: DegradationSpec | None = None,
    n_train: int = 200,
    n_val: int = 32,
    size: int = 64,
    seed: int = 0,
) -> dict[str, DatasetManifest]:
    """Procedural train/val splits with disjoint base images and degradation seeds."""
    spec = spec or DegradationSpec("rain", seed=seed)
    root = Path(out_root)
    out = {}
    for split, n, offset in (("train", n_train, 0), ("val", n_val, 1)):
        bases = [procedural_image(seed * 1_000_003 + offset * 100_000 + i, size) for i in range(n)]
        split_spec = spec.with_seed(spec.seed * 2 + offset)
        out[split] = generate_dataset(bases, split_spec, n, root / split, split=split)
    return out


__all__ = [
    "DatasetManifest",
    "DegradationSpec",
    "add_gaussian_noise",
    "add_rain_streaks",
    "degrade",
    "gaussian_blur",
    "generate_dataset",
    "load_clean_folder",
    "load_manifest",
    "make_splits",
    "procedural_image",
]
