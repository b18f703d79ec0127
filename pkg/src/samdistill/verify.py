"""Offline verification suite: loss oracles, gradient checks and training contracts.

Each ``check_*`` function returns a :class:`CheckResult`. All checks run in
float64 with the seeded-random perceptual extractor and need no downloads.
"""

from __future__ import annotations

import copy
import hashlib
import math
import tempfile
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .config import TrainConfig
from .core import reference
from .core.gradcheck import check_gradient
from .core.metrics import psnr, ssim
from .distill import (
    PerceptualConfig,
    PerceptualExtractor,
    perceptual_features,
    relation_matrix,
    sample_sgr,
    sgr_loss,
    smooth_l1,
    spd_sgr_losses,
)
from .models import resize_packed_masks
from .models import BaselineIR, Refiner, RefinerConfig, SPFUnit, SPFUnitConfig
from .segmenter import Segmenter
from .train import BatchSampler, Checkpoint, PairedData, build_state, evaluate, train, train_step


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _timed(name):
    def wrap(fn):
        def run(*args, **kwargs):
            t0 = time.perf_counter()
            passed, detail = fn(*args, **kwargs)
            return CheckResult(name, bool(passed), detail, time.perf_counter() - t0)

        run.__name__ = fn.__name__
        run.__doc__ = fn.__doc__
        return run

    return wrap


def _extractor(seed: int = 0) -> PerceptualExtractor:
    return PerceptualExtractor(PerceptualConfig(seed=seed)).double()


def _random_masks(rng, n: int, h: int, w: int) -> torch.Tensor:
    return torch.from_numpy((rng.random((n, h, w)) < 0.5).astype(np.float64))


@_timed("loss oracles")
def check_loss_oracles(trials: int = 100, seed: int = 0, tol: float = 1e-6):
    """smooth_l1, relation_matrix and sgr_loss against scalar-loop references."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        shape = (3, int(rng.integers(1, 6)), int(rng.integers(1, 6)))
        a = rng.normal(0, 1.5, shape)
        b = rng.normal(0, 1.5, shape)
        got = smooth_l1(torch.from_numpy(a), torch.from_numpy(b)).item()
        worst = max(worst, abs(got - reference.smooth_l1_loop(a, b)))

        n, d = int(rng.integers(2, 7)), int(rng.integers(1, 40))
        v1 = rng.normal(size=(n, d))
        v2 = rng.normal(size=(n, d))
        r1 = relation_matrix(torch.from_numpy(v1)).numpy()
        r2 = relation_matrix(torch.from_numpy(v2)).numpy()
        worst = max(worst, float(np.abs(r1 - reference.relation_loop(list(v1))).max()))
        got = sgr_loss(torch.from_numpy(r1), torch.from_numpy(r2)).item()
        worst = max(worst, abs(got - reference.sgr_loop(r1, r2)))
    return worst < tol, f"{trials} trials, max abs deviation {worst:.2e} (tol {tol:g})"


@_timed("gradient checks")
def check_gradients(trials: int = 20, seed: int = 0, tol: float = 1e-3):
    """d l_spd / d student and d l_sgr / d student against central differences.

    Autograd goes through ``spd_sgr_losses``; the numeric side evaluates
    the perturbed images in batches from the same building blocks, sharing
    their perceptual features across the four SGR variants. Coordinates
    whose step straddles a ReLU/max-pool switch are re-differenced with a
    smaller step.
    """
    rng = np.random.default_rng(seed)
    ext = _extractor(seed)
    variants = [(mode, dist) for mode in ("pool", "flatten") for dist in ("abs", "squared")]
    worst = {"spd": 0.0, **{f"sgr_{m}_{d}": 0.0 for m, d in variants}}

    for _ in range(trials):
        hq1 = torch.from_numpy(rng.random((1, 3, 16, 16)))
        hq2 = (hq1 + torch.from_numpy(rng.normal(0, 0.8, (1, 3, 16, 16)))).clamp(-1, 2)
        masks = _random_masks(rng, 4, 16, 16)[None]
        with torch.no_grad():
            f2 = perceptual_features(hq2, ext)[0]
        low = resize_packed_masks(masks, tuple(f2.shape[-2:]))[0]
        cache: dict[bytes, torch.Tensor] = {}

        def features(xs):
            key = hashlib.sha1(xs.numpy().tobytes()).digest()
            if key not in cache:
                cache[key] = perceptual_features(xs.reshape(-1, 3, 16, 16), ext)
            return cache[key]

        spd_fn = lambda x: spd_sgr_losses(x, hq2, masks, None, with_sgr=False).spd
        spd_batch = lambda xs: torch.stack([smooth_l1(x, hq2[0]) for x in xs.reshape(-1, 3, 16, 16)])
        worst["spd"] = max(worst["spd"], check_gradient(spd_fn, hq1, batch_fn=spd_batch).max_rel_error)

        for mode, dist in variants:

            def fn(x, mode=mode, dist=dist):
                return spd_sgr_losses(x, hq2, masks, ext, mode=mode, distance=dist, with_spd=False).sgr

            def batch_fn(xs, mode=mode, dist=dist):
                return torch.stack([_sgr_or_zero(f, f2, low, mode, dist) for f in features(xs)])

            key = f"sgr_{mode}_{dist}"
            worst[key] = max(worst[key], check_gradient(fn, hq1, batch_fn=batch_fn).max_rel_error)
    ok = all(v < tol for v in worst.values())
    return ok, f"{trials} instances 3x16x16, max rel error " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())


def _sgr_or_zero(f1, f2, low, mode, dist):
    term = sample_sgr(f1, f2, low, mode, dist)
    return f1.new_zeros(()) if term is None else term


@_timed("smooth-L1 branch continuity")
def check_smooth_l1_continuity():
    quad = 0.5 * 1.0**2
    lin = 1.0 - 0.5
    value_gap = abs(quad - lin)

    def grad_at(v):
        x = torch.tensor([v], dtype=torch.float64, requires_grad=True)
        smooth_l1(x, torch.zeros(1, dtype=torch.float64)).backward()
        return x.grad.item()

    delta = 1e-12
    deriv_gap = abs(grad_at(1.0 + delta) - grad_at(1.0 - delta))
    branch_gap = abs(grad_at(1.0) - 1.0)
    ok = value_gap < 1e-12 and deriv_gap < 1e-9 and branch_gap < 1e-9
    return ok, f"value gap {value_gap:.1e}, derivative gap {deriv_gap:.1e}"


def _tiny_data(n: int = 16, size: int = 16, seed: int = 0, dtype=torch.float64) -> PairedData:
    rng = np.random.default_rng(seed)
    hq = rng.random((n, 3, size, size))
    lq = np.clip(hq + rng.normal(0, 0.1, hq.shape), 0, 1)
    return PairedData.from_arrays(lq, hq, dtype=dtype)


def _tiny_config(**kw) -> TrainConfig:
    base = TrainConfig(dtype="float64", batch_size=4, steps=10, log_every=1)
    return replace(base, optimizer=replace(base.optimizer, lr=1e-3), **kw)


@_timed("stop-gradient contract")
def check_stop_gradient(steps: int = 10, seed: int = 0):
    """Distillation terms never reach the teacher; frozen parts never change."""
    cfg = _tiny_config(seed=seed, steps=steps)
    data = _tiny_data(seed=seed)
    state = build_state(cfg, len(data))
    ext_before = copy.deepcopy(state.extractor.state_dict())
    seg_before = copy.deepcopy(state.segmenter.inner.cfg)
    worst = 0.0
    for _ in range(steps):
        idx = state.sampler.next()
        rec = train_step(state, data.lq[idx], data.hq[idx], check_isolation=True)
        worst = max(worst, rec.teacher_distill_grad)
    frozen = all(torch.equal(ext_before[k], v) for k, v in state.extractor.state_dict().items())
    frozen &= not any(p.requires_grad for p in state.extractor.parameters())
    seg_same = state.segmenter.inner.cfg == seg_before
    ok = worst == 0.0 and frozen and seg_same
    return ok, f"{steps} steps, max |grad teacher (distill)| = {worst:g}, extractor frozen {frozen}, segmenter unchanged {seg_same}"


@_timed("relation properties")
def check_relation_properties(trials: int = 200, seed: int = 0):
    rng = np.random.default_rng(seed)
    sym = rng_err = self_err = disjoint = perm = 0.0
    for _ in range(trials):
        c, h, w = int(rng.integers(1, 8)), int(rng.integers(3, 7)), int(rng.integers(3, 7))
        n = int(rng.integers(2, 6))
        feat = torch.from_numpy(rng.normal(size=(c, h, w)))
        masks = _random_masks(rng, n, h, w)
        masks[:, 0, 0] = 1.0  # keep every mask non-empty
        gated = feat[None] * masks[:, None]
        r = relation_matrix(gated)
        sym = max(sym, float((r - r.T).abs().max()))
        off = r[~torch.eye(n, dtype=torch.bool)]
        rng_err = max(rng_err, float((off.abs() - 1).clamp_min(0).max()))

        dup = torch.stack([gated[0], gated[0]])
        self_err = max(self_err, abs(relation_matrix(dup)[0, 1].item() - 1.0))

        labels = torch.from_numpy(rng.integers(0, n, size=(h, w)))
        labels.view(-1)[:n] = torch.arange(n)  # every part non-empty
        part = (labels[None] == torch.arange(n)[:, None, None]).double()
        rp = relation_matrix(feat[None] * part[:, None])
        disjoint = max(disjoint, float(rp[~torch.eye(n, dtype=torch.bool)].abs().max()))

        r1 = torch.from_numpy(rng.uniform(-1, 1, (n, n)))
        r2 = torch.from_numpy(rng.uniform(-1, 1, (n, n)))
        p = torch.from_numpy(rng.permutation(n))
        perm = max(perm, abs(sgr_loss(r1, r2).item() - sgr_loss(r1[p][:, p], r2[p][:, p]).item()))
    ok = sym <= 1e-6 and rng_err <= 1e-6 and self_err <= 1e-6 and disjoint == 0.0 and perm <= 1e-9
    return ok, (
        f"{trials} trials: asym {sym:.1e}, range excess {rng_err:.1e}, self-sim err {self_err:.1e}, "
        f"disjoint |R| {disjoint:.1e}, perm gap {perm:.1e}"
    )


@_timed("SPF structure")
def check_spf_structure(seed: int = 0):
    torch.manual_seed(seed)
    x = torch.rand(2, 3, 16, 16, dtype=torch.float64)
    masks = torch.zeros(2, 8, 16, 16, dtype=torch.float64)
    masks[:, 0, :, :8] = 1
    masks[:, 1, :, 8:] = 1
    notes, ok = [], True

    for n_blocks in (2, 3, 4):
        ref = Refiner(RefinerConfig(n_blocks=n_blocks)).double()
        before = [u.calls for u in ref.spf]
        out = ref(x, masks)
        counted = len(ref.spf) == n_blocks and all(u.calls == b + 1 for u, b in zip(ref.spf, before))
        identity = torch.equal(out, x)
        ok &= counted and identity
    notes.append(f"units==blocks and identity-at-init {ok}")

    unit = SPFUnit(16, 16, 8, SPFUnitConfig()).double()
    plain = SPFUnit(16, 16, 8, SPFUnitConfig(attention=False)).double()
    plain.load_state_dict(unit.state_dict())
    with torch.no_grad():
        unit.gate.weight.zero_()
        unit.gate.bias.fill_(50.0)
    f_in, f_blk = torch.rand(2, 16, 16, 16, dtype=torch.float64), torch.rand(2, 16, 8, 8, dtype=torch.float64)
    gap = (unit(f_in, f_blk, masks) - plain(f_in, f_blk, masks)).detach().abs().max().item()
    shape_ok = unit(f_in, f_blk, masks).shape == f_blk.shape
    ok &= gap < 1e-6 and shape_ok
    notes.append(f"saturated-gate gap {gap:.1e}")

    ref = Refiner(RefinerConfig()).double()
    with torch.no_grad():
        torch.nn.init.normal_(ref.tail.weight, std=0.1)
    bumped = masks.clone()
    bumped[:, 2, 4:8, 4:8] = 1
    sens = (ref(x, bumped) - ref(x, masks)).detach().abs().max().item()
    base = ref(x, masks)
    dead = []
    for i in range(len(ref.spf)):
        saved = ref.spf[i]
        ref.spf[i] = _PassThrough()
        dead.append(torch.equal(ref(x, masks), base))
        ref.spf[i] = saved
    ok &= sens > 0 and not any(dead)
    notes.append(f"mask sensitivity {sens:.1e}, dead units {sum(dead)}")
    return ok, "; ".join(notes)


class _PassThrough(torch.nn.Module):
    def forward(self, f_in, f_block, masks):
        return f_block


@_timed("baseline equivalence")
def check_baseline_equivalence(steps: int = 50, seed: int = 0):
    """With both weights at zero the student follows plain L1 training bit for bit."""
    data = _tiny_data(seed=seed)
    cfg = _tiny_config(seed=seed, steps=steps, lambda1=0.0, lambda2=0.0, log_every=0)
    ckpt = train(cfg, data)

    torch.manual_seed(seed)
    model = BaselineIR(cfg.baseline).double()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.optimizer.lr, betas=(cfg.optimizer.beta1, cfg.optimizer.beta2))
    sampler = BatchSampler(len(data), cfg.batch_size, seed)
    for _ in range(steps):
        idx = sampler.next()
        opt.zero_grad()
        F.l1_loss(model(data.lq[idx]), data.hq[idx]).backward()
        opt.step()
    same = all(torch.equal(ckpt.baseline[k], v) for k, v in model.state_dict().items())
    return same, f"{steps} steps float64, student parameters bitwise equal: {same}"


@_timed("metrics")
def check_metrics(seed: int = 0):
    rng = np.random.default_rng(seed)
    a = np.full((3, 16, 16), 0.4)
    closed = abs(psnr(a + 0.1, a) - 20.0)
    ident = psnr(a, a) == 100.0
    x = rng.random((3, 16, 16))
    y = np.clip(x + rng.uniform(-0.05, 0.05, x.shape), 0, 1)
    loop = abs(psnr(x, y) - reference.psnr_loop(x, y))
    p = rng.random((1, 32, 32))
    q = rng.random((1, 32, 32))
    s_err = abs(ssim(p, q) - reference.ssim_loop(p, q))
    s_id = abs(ssim(x, x) - 1.0)
    ok = closed < 1e-9 and ident and loop < 1e-9 and s_err < 1e-6 and s_id < 1e-12
    return ok, f"psnr closed-form err {closed:.1e}, loop err {loop:.1e}; ssim oracle err {s_err:.1e}"


@_timed("checkpoint resume")
def check_resume(first: int = 5, extra: int = 10, seed: int = 0):
    data = _tiny_data(seed=seed)
    full = train(_tiny_config(seed=seed, steps=first + extra, log_every=0), data)
    with tempfile.TemporaryDirectory() as tmp:
        part = train(_tiny_config(seed=seed, steps=first, log_every=0), data)
        path = part.save(Path(tmp) / "ckpt.pt")
        resumed = train(_tiny_config(seed=seed, steps=first + extra, log_every=0), data, resume=Checkpoint.load(path))
    same = all(torch.equal(full.baseline[k], resumed.baseline[k]) for k in full.baseline)
    same &= all(torch.equal(full.refiner[k], resumed.refiner[k]) for k in full.refiner)
    return same, f"save at {first}, resume {extra} steps: bitwise equal {same}"


@_timed("student-only inference")
def check_student_inference(seed: int = 0):
    data = _tiny_data(n=4, seed=seed)
    ckpt = train(_tiny_config(seed=seed, steps=2, log_every=0), data)
    seg0, ref0 = Segmenter.calls, Refiner.forward_calls
    report = evaluate(ckpt, data, "student")
    segs, refs = Segmenter.calls - seg0, Refiner.forward_calls - ref0
    ok = segs == 0 and refs == 0 and math.isfinite(report["psnr"])
    return ok, f"segmenter calls {segs}, refiner calls {refs}"


FAST_CHECKS = [
    check_loss_oracles,
    check_gradients,
    check_smooth_l1_continuity,
    check_stop_gradient,
    check_relation_properties,
    check_spf_structure,
    check_baseline_equivalence,
    check_student_inference,
    check_metrics,
    check_resume,
]


def run_all(checks=None) -> list[CheckResult]:
    return [check() for check in (checks or FAST_CHECKS)]


def format_table(results: list[CheckResult]) -> str:
    return "\n".join(r.line() for r in results)
