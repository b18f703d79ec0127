"""Distilled-vs-baseline student comparison on the synthetic rain task."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from .config import TrainConfig
from .data import DegradationSpec, make_splits
from .train import PairedData, evaluate, mean_psnr, train

log = logging.getLogger(__name__)


@dataclass
class SeedResult:
    seed: int
    distilled_psnr: float
    baseline_psnr: float
    teacher_psnr: float
    seconds: float

    @property
    def delta(self) -> float:
        return self.distilled_psnr - self.baseline_psnr


@dataclass
class ComparisonResult:
    seeds: list[SeedResult] = field(default_factory=list)
    input_psnr: float = 0.0

    @property
    def mean_delta(self) -> float:
        return sum(s.delta for s in self.seeds) / len(self.seeds)

    def rows(self) -> list[str]:
        out = [f"input psnr {self.input_psnr:.3f} dB"]
        for s in self.seeds:
            out.append(
                f"seed {s.seed}: distilled {s.distilled_psnr:.3f}  baseline {s.baseline_psnr:.3f}  "
                f"teacher {s.teacher_psnr:.3f}  delta {s.delta:+.3f} dB  ({s.seconds:.0f}s)"
            )
        out.append(f"mean delta {self.mean_delta:+.4f} dB")
        return out


def compare_distillation(
    out_root,
    seeds=(0, 1, 2),
    cfg: TrainConfig | None = None,
    n_train: int = 200,
    n_val: int = 32,
    size: int = 64,
    data_seed: int = 0,
) -> ComparisonResult:
    """Train a distilled run and a student-only run per seed; compare student val PSNR.

    The student-only run skips the teacher entirely: with both loss weights
    at zero the student's trajectory does not depend on it.
    """
    cfg = cfg or TrainConfig()
    root = Path(out_root)
    splits = make_splits(root / "data", DegradationSpec("rain", seed=data_seed), n_train, n_val, size, data_seed)
    train_data = PairedData.from_manifest(splits["train"])
    val_data = PairedData.from_manifest(splits["val"])

    result = ComparisonResult(input_psnr=mean_psnr(val_data.lq, val_data.hq))
    for seed in seeds:
        started = time.perf_counter()
        distilled_cfg = replace(cfg, seed=seed, eval_every=0, checkpoint_dir=None)
        base_cfg = replace(distilled_cfg, lambda1=0.0, lambda2=0.0, train_teacher=False)
        ck_d = train(distilled_cfg, train_data, val_data)
        ck_b = train(base_cfg, train_data, val_data)
        res = SeedResult(
            seed=seed,
            distilled_psnr=evaluate(ck_d, val_data, "student")["psnr"],
            baseline_psnr=evaluate(ck_b, val_data, "student")["psnr"],
            teacher_psnr=evaluate(ck_d, val_data, "teacher")["psnr"],
            seconds=time.perf_counter() - started,
        )
        log.info("seed %d delta %+.4f dB", seed, res.delta)
        result.seeds.append(res)
    return result

