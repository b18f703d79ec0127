"""Joint training of the student/teacher cascade, checkpoints and evaluation.

One step:

1. ``hq1 = student(lq)``
2. masks from ``hq1`` (segmenter, no gradient)
3. ``hq2 = teacher(hq1, masks)`` with ``hq1`` detached by default
4. student loss ``L1(hq1, gt) + lambda1 * spd + lambda2 * sgr``;
   teacher loss ``L1(hq2, gt)``; distillation terms never reach the teacher
5. both Adam optimizers step
"""

from __future__ import annotations

import copy
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import TrainConfig, save_config
from .core.metrics import psnr, ssim
from .data import DatasetManifest, load_manifest
from .distill import PerceptualExtractor, spd_sgr_losses
from .models import BaselineIR, Refiner, pack_masks
from .segmenter import CachedSegmenter, make_segmenter

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
DTYPES = {"float32": torch.float32, "float64": torch.float64}


class NonFiniteLossError(FloatingPointError):
    def __init__(self, record: "TrainLogRecord"):
        super().__init__(f"non-finite loss at step {record.step}: {asdict(record)}")
        self.record = record


@dataclass
class TrainLogRecord:
    step: int
    l_recon1: float
    l_recon2: float
    l_spd: float
    l_sgr: float
    total: float
    val_psnr1: float | None = None
    val_psnr2: float | None = None
    sgr_skips: int = 0
    teacher_distill_grad: float | None = None

    def finite(self) -> bool:
        vals = [self.l_recon1, self.l_recon2, self.l_spd, self.l_sgr, self.total]
        return all(math.isfinite(v) for v in vals)


@dataclass
class PairedData:
    lq: torch.Tensor
    hq: torch.Tensor
    ids: list[str]

    def __len__(self):
        return self.lq.shape[0]

    @classmethod
    def from_arrays(cls, lq, hq, ids=None, dtype=torch.float32) -> "PairedData":
        lq = torch.as_tensor(np.asarray(lq), dtype=dtype)
        hq = torch.as_tensor(np.asarray(hq), dtype=dtype)
        if lq.shape != hq.shape:
            raise ValueError(f"lq/hq shapes differ: {tuple(lq.shape)} vs {tuple(hq.shape)}")
        ids = list(ids) if ids is not None else [f"sample_{i:05d}" for i in range(lq.shape[0])]
        return cls(lq, hq, ids)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest | str | os.PathLike, dtype=torch.float32) -> "PairedData":
        if not isinstance(manifest, DatasetManifest):
            manifest = load_manifest(manifest)
        if len(manifest) == 0:
            raise ValueError("empty split")
        lq, hq, ids = manifest.load_arrays()
        return cls.from_arrays(lq, hq, ids, dtype)


class BatchSampler:
    """Shuffled epochs driven by a private seeded generator."""

    def __init__(self, n: int, batch_size: int, seed: int):
        if n < 1:
            raise ValueError("no training samples")
        self.n = n
        self.batch_size = min(batch_size, n)
        self.gen = torch.Generator().manual_seed(seed)
        self.perm = torch.randperm(n, generator=self.gen)
        self.pos = 0
        self.epoch = 0

    def next(self) -> torch.Tensor:
        if self.pos + self.batch_size > self.n:
            self.perm = torch.randperm(self.n, generator=self.gen)
            self.pos = 0
            self.epoch += 1
        idx = self.perm[self.pos : self.pos + self.batch_size]
        self.pos += self.batch_size
        return idx

    def state_dict(self) -> dict:
        return {"gen": self.gen.get_state(), "perm": self.perm.clone(), "pos": self.pos, "epoch": self.epoch}

    def load_state_dict(self, s: dict) -> None:
        self.gen.set_state(s["gen"])
        self.perm = s["perm"].clone()
        self.pos = int(s["pos"])
        self.epoch = int(s["epoch"])


@dataclass
class TrainState:
    cfg: TrainConfig
    baseline: BaselineIR
    refiner: Refiner
    opt1: torch.optim.Adam
    opt2: torch.optim.Adam
    segmenter: CachedSegmenter
    extractor: PerceptualExtractor | None
    sampler: BatchSampler | None = None
    step: int = 0
    history: list = field(default_factory=list)

    @property
    def dtype(self) -> torch.dtype:
        return DTYPES[self.cfg.dtype]


def _adam(params, cfg: TrainConfig) -> torch.optim.Adam:
    o = cfg.optimizer
    return torch.optim.Adam(params, lr=o.lr, betas=(o.beta1, o.beta2))


def build_state(cfg: TrainConfig, n_train: int | None = None) -> TrainState:
    """Fresh models and optimizers; the student is initialized first from ``cfg.seed``."""
    dtype = DTYPES[cfg.dtype]
    torch.manual_seed(cfg.seed)
    baseline = BaselineIR(cfg.baseline).to(dtype)
    refiner = Refiner(cfg.refiner).to(dtype)
    extractor = PerceptualExtractor(cfg.perceptual).to(dtype) if cfg.lambda2 > 0 else None
    if cfg.dtype == "float32":
        # NHWC convs are ~25% faster on CPU; 64-bit runs keep the default
        # layout so their bitwise checks compare like with like
        for m in (baseline, refiner, extractor):
            if m is not None:
                m.to(memory_format=torch.channels_last)
    seg = CachedSegmenter(make_segmenter(cfg.segmenter), cfg.segmenter.refresh_interval)
    sampler = BatchSampler(n_train, cfg.batch_size, cfg.seed) if n_train else None
    return TrainState(cfg, baseline, refiner, _adam(baseline.parameters(), cfg), _adam(refiner.parameters(), cfg), seg, extractor, sampler)


def segment_batch(state: TrainState, images: torch.Tensor, ids=None) -> torch.Tensor:
    """Packed ``[B, n_max, H, W]`` masks for each image in the batch."""
    n_max = state.cfg.segmenter.n_max
    arr = images.detach().clamp(0, 1).to(torch.float64).numpy()
    packed = []
    for b, img in enumerate(arr):
        image_id = ids[b] if ids is not None else None
        masks = state.segmenter.segment(img, image_id, state.step)
        packed.append(pack_masks(masks, n_max, *img.shape[1:]))
    return torch.as_tensor(np.stack(packed), dtype=images.dtype)


def distill_grad_on_teacher(state: TrainState, distill: torch.Tensor) -> float:
    """Largest |d distill / d theta_teacher|; zero by construction."""
    params = [p for p in state.refiner.parameters() if p.requires_grad]
    if not distill.requires_grad:
        return 0.0
    grads = torch.autograd.grad(distill, params, retain_graph=True, allow_unused=True)
    return max((float(g.abs().max()) for g in grads if g is not None), default=0.0)


def train_step(state: TrainState, lq: torch.Tensor, hq: torch.Tensor, ids=None, *, check_isolation: bool = False) -> TrainLogRecord:
    """One joint update of student and teacher; mutates ``state`` and returns the step's losses."""
    cfg = state.cfg
    state.baseline.train()
    state.refiner.train()
    if cfg.dtype == "float32":
        lq = lq.contiguous(memory_format=torch.channels_last)
        hq = hq.contiguous(memory_format=torch.channels_last)

    hq1 = state.baseline(lq)
    recon1 = F.l1_loss(hq1, hq)
    if not cfg.train_teacher:
        return _student_only_step(state, recon1)
    masks = segment_batch(state, hq1, ids)
    hq2 = state.refiner(hq1.detach() if cfg.detach_cascade_input else hq1, masks)
    recon2 = F.l1_loss(hq2, hq)
    d = spd_sgr_losses(
        hq1,
        hq2,
        masks,
        state.extractor,
        mode=cfg.relation_vectorize,
        distance=cfg.sgr_distance,
        with_spd=cfg.lambda1 > 0,
        with_sgr=cfg.lambda2 > 0,
    )
    student = recon1
    distill = None
    if cfg.lambda1 > 0:
        distill = cfg.lambda1 * d.spd
    if cfg.lambda2 > 0:
        distill = cfg.lambda2 * d.sgr if distill is None else distill + cfg.lambda2 * d.sgr
    if distill is not None:
        student = student + distill
    total = student + recon2

    record = TrainLogRecord(
        step=state.step + 1,
        l_recon1=recon1.item(),
        l_recon2=recon2.item(),
        l_spd=d.spd.item(),
        l_sgr=d.sgr.item(),
        total=student.item(),
        sgr_skips=d.sgr_skips,
    )
    if not record.finite():
        raise NonFiniteLossError(record)
    if check_isolation:
        record.teacher_distill_grad = distill_grad_on_teacher(state, distill) if distill is not None else 0.0

    state.opt1.zero_grad(set_to_none=True)
    state.opt2.zero_grad(set_to_none=True)
    total.backward()
    state.opt1.step()
    state.opt2.step()
    state.step += 1
    return record


def _student_only_step(state: TrainState, recon1: torch.Tensor) -> TrainLogRecord:
    record = TrainLogRecord(state.step + 1, recon1.item(), 0.0, 0.0, 0.0, recon1.item())
    if not record.finite():
        raise NonFiniteLossError(record)
    state.opt1.zero_grad(set_to_none=True)
    recon1.backward()
    state.opt1.step()
    state.step += 1
    return record


@torch.no_grad()
def restore(
    baseline: BaselineIR, lq: torch.Tensor, refiner: Refiner | None = None, segmenter=None, batch: int = 16, ids=None
) -> torch.Tensor:
    """Clamped student outputs, or full-cascade outputs when a refiner is given.

    ``ids`` name the images for segmenters that look masks up by id.
    """
    baseline.eval()
    if refiner is not None:
        refiner.eval()
    outs = []
    for i in range(0, lq.shape[0], batch):
        out = baseline(lq[i : i + batch])
        if refiner is not None:
            arr = out.clamp(0, 1).to(torch.float64).numpy()
            n_max = refiner.cfg.mask_channels
            names = ids[i : i + batch] if ids is not None else [None] * len(arr)
            packed = np.stack([pack_masks(segmenter.segment(a, name), n_max) for a, name in zip(arr, names)])
            out = refiner(out, torch.as_tensor(packed, dtype=out.dtype))
        outs.append(out.clamp(0, 1))
    return torch.cat(outs)


def mean_psnr(pred: torch.Tensor, target: torch.Tensor) -> float:
    p = pred.to(torch.float64).numpy()
    t = target.to(torch.float64).numpy()
    return float(np.mean([psnr(a, b) for a, b in zip(p, t)]))


def validate(state: TrainState, val: PairedData) -> tuple[float, float]:
    p1 = mean_psnr(restore(state.baseline, val.lq), val.hq)
    p2 = mean_psnr(restore(state.baseline, val.lq, state.refiner, state.segmenter.inner, ids=val.ids), val.hq)
    return p1, p2


@dataclass
class Checkpoint:
    """Everything needed to resume training or run inference.

    On disk: a ``torch.save`` zip holding this dict, with the config as an
    embedded JSON string under ``config_json``.
    """

    step: int
    config: dict
    baseline: dict
    refiner: dict
    opt1: dict
    opt2: dict
    rng: dict
    history: list = field(default_factory=list)
    version: int = CHECKPOINT_VERSION

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "version": self.version,
            "step": self.step,
            "config_json": json.dumps(self.config),
            "baseline": self.baseline,
            "refiner": self.refiner,
            "opt1": self.opt1,
            "opt2": self.opt2,
            "rng": self.rng,
            "history_json": json.dumps(self.history),
        }
        tmp = path.with_name(path.name + ".tmp")
        torch.save(payload, tmp)
        os.replace(tmp, path)
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        payload = torch.load(Path(path), map_location="cpu", weights_only=False)
        version = payload.get("version")
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        return cls(
            step=payload["step"],
            config=json.loads(payload["config_json"]),
            baseline=payload["baseline"],
            refiner=payload["refiner"],
            opt1=payload["opt1"],
            opt2=payload["opt2"],
            rng=payload["rng"],
            history=json.loads(payload.get("history_json", "[]")),
            version=version,
        )


def make_checkpoint(state: TrainState) -> Checkpoint:
    return Checkpoint(
        step=state.step,
        config=state.cfg.to_dict(),
        baseline=copy.deepcopy(state.baseline.state_dict()),
        refiner=copy.deepcopy(state.refiner.state_dict()),
        opt1=copy.deepcopy(state.opt1.state_dict()),
        opt2=copy.deepcopy(state.opt2.state_dict()),
        rng={"sampler": state.sampler.state_dict() if state.sampler else None, "torch": torch.get_rng_state()},
        history=list(state.history),
    )


def state_from_checkpoint(ckpt: Checkpoint, cfg: TrainConfig | None = None, n_train: int | None = None) -> TrainState:
    cfg = cfg or ckpt.train_config
    state = build_state(cfg, n_train)
    state.baseline.load_state_dict(ckpt.baseline)
    state.refiner.load_state_dict(ckpt.refiner)
    state.opt1.load_state_dict(ckpt.opt1)
    state.opt2.load_state_dict(ckpt.opt2)
    if state.sampler is not None and ckpt.rng.get("sampler") is not None:
        state.sampler.load_state_dict(ckpt.rng["sampler"])
    if ckpt.rng.get("torch") is not None:
        torch.set_rng_state(ckpt.rng["torch"])
    state.step = ckpt.step
    state.history = list(ckpt.history)
    return state


def _load_split(path, dtype) -> PairedData | None:
    return PairedData.from_manifest(path, dtype) if path else None


def train(
    cfg: TrainConfig,
    data: PairedData | None = None,
    val: PairedData | None = None,
    *,
    resume: Checkpoint | None = None,
    check_isolation: bool = False,
) -> Checkpoint:
    """Run ``cfg.steps`` joint steps (or ``cfg.epochs`` epochs) and return the final checkpoint.

    ``data``/``val`` default to the manifests named in the config. With a
    ``checkpoint_dir`` the run writes ``effective_config.yaml``,
    ``run.json``, ``log.jsonl`` and atomically replaced checkpoints.
    """
    dtype = DTYPES[cfg.dtype]
    data = data or _load_split(cfg.manifest, dtype)
    if data is None:
        raise ValueError("no training data: set manifest or pass data")
    val = val or _load_split(cfg.val_manifest, dtype)
    data = PairedData(data.lq.to(dtype), data.hq.to(dtype), data.ids)
    if val is not None:
        val = PairedData(val.lq.to(dtype), val.hq.to(dtype), val.ids)

    state = state_from_checkpoint(resume, cfg, len(data)) if resume else build_state(cfg, len(data))
    steps = cfg.steps
    if cfg.epochs is not None:
        steps = cfg.epochs * (len(data) // state.sampler.batch_size)

    out_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_config(cfg, out_dir / "effective_config.yaml")
        (out_dir / "run.json").write_text(json.dumps({"label": cfg.label, "seed": cfg.seed, "steps": steps}, indent=2))
        log_file = open(out_dir / "log.jsonl", "a" if resume else "w")
    log.info("run %s: %d steps, seed %d", cfg.label, steps, cfg.seed)

    started = time.perf_counter()
    try:
        while state.step < steps:
            idx = state.sampler.next()
            ids = [data.ids[i] for i in idx.tolist()]
            record = train_step(state, data.lq[idx], data.hq[idx], ids, check_isolation=check_isolation)
            last = state.step == steps
            if val is not None and ((cfg.eval_every and state.step % cfg.eval_every == 0) or last):
                if cfg.train_teacher:
                    record.val_psnr1, record.val_psnr2 = validate(state, val)
                else:
                    record.val_psnr1 = mean_psnr(restore(state.baseline, val.lq), val.hq)
            if (cfg.log_every and state.step % cfg.log_every == 0) or last or record.val_psnr1 is not None:
                row = asdict(record)
                state.history.append(row)
                if log_file:
                    log_file.write(json.dumps(row) + "\n")
                    log_file.flush()
                log.info("step %d total %.5f recon1 %.5f recon2 %.5f", record.step, record.total, record.l_recon1, record.l_recon2)
            if out_dir is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                make_checkpoint(state).save(out_dir / "last.pt")
    finally:
        if log_file:
            log_file.close()
    log.info("finished %d steps in %.1fs", state.step, time.perf_counter() - started)

    ckpt = make_checkpoint(state)
    if out_dir is not None:
        ckpt.save(out_dir / "last.pt")
    return ckpt


def load_student(ckpt: Checkpoint) -> BaselineIR:
    cfg = ckpt.train_config
    model = BaselineIR(cfg.baseline).to(DTYPES[cfg.dtype])
    model.load_state_dict(ckpt.baseline)
    return model.eval()


def evaluate(ckpt: Checkpoint, manifest, which: str = "student") -> dict:
    """Mean PSNR/SSIM over a split.

    ``which='student'`` runs only the student network: no segmenter,
    refiner or perceptual extractor is constructed.
    """
    if which not in ("student", "teacher"):
        raise ValueError("which must be 'student' or 'teacher'")
    cfg = ckpt.train_config
    dtype = DTYPES[cfg.dtype]
    data = manifest if isinstance(manifest, PairedData) else PairedData.from_manifest(manifest, dtype)
    if len(data) == 0:
        raise ValueError("empty split")
    lq, hq = data.lq.to(dtype), data.hq.to(dtype)

    student = load_student(ckpt)
    if which == "student":
        out = restore(student, lq)
    else:
        refiner = Refiner(cfg.refiner).to(dtype)
        refiner.load_state_dict(ckpt.refiner)
        out = restore(student, lq, refiner, make_segmenter(cfg.segmenter), ids=data.ids)

    pred = out.to(torch.float64).numpy()
    gt = hq.to(torch.float64).numpy()
    return {
        "which": which,
        "n": len(data),
        "step": ckpt.step,
        "psnr": float(np.mean([psnr(a, b) for a, b in zip(pred, gt)])),
        "ssim": float(np.mean([ssim(a, b) for a, b in zip(pred, gt)])),
    }
