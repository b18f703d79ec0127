import copy
import json
import math
from dataclasses import replace

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from samdistill.config import TrainConfig
from samdistill.core import psnr
from samdistill.data import DegradationSpec, make_splits
from samdistill.distill import frozen_fingerprint, spd_sgr_losses
from samdistill.models import Refiner
from samdistill.segmenter import Segmenter
from samdistill.train import (
    BatchSampler,
    Checkpoint,
    NonFiniteLossError,
    PairedData,
    build_state,
    evaluate,
    restore,
    segment_batch,
    train,
    train_step,
)


def tiny_data(n=12, size=16, seed=0, dtype=torch.float64):
    rng = np.random.default_rng(seed)
    hq = rng.random((n, 3, size, size))
    lq = np.clip(hq + rng.normal(0, 0.1, hq.shape), 0, 1)
    return PairedData.from_arrays(lq, hq, dtype=dtype)


def tiny_cfg(**kw):
    base = TrainConfig(dtype="float64", batch_size=4, steps=6, log_every=1)
    return replace(base, optimizer=replace(base.optimizer, lr=1e-3), **kw)


def test_sampler_deterministic_and_resumable():
    a, b = BatchSampler(10, 4, 3), BatchSampler(10, 4, 3)
    seq = [a.next().tolist() for _ in range(5)]
    assert seq == [b.next().tolist() for _ in range(5)]
    s = a.state_dict()
    nxt = [a.next().tolist() for _ in range(3)]
    c = BatchSampler(10, 4, 99)
    c.load_state_dict(s)
    assert [c.next().tolist() for _ in range(3)] == nxt


def test_step_updates_both_models_and_isolation():
    data = tiny_data()
    state = build_state(tiny_cfg(), len(data))
    b0 = copy.deepcopy(state.baseline.state_dict())
    r0 = copy.deepcopy(state.refiner.state_dict())
    rec = train_step(state, data.lq[:4], data.hq[:4], check_isolation=True)
    assert rec.teacher_distill_grad == 0.0
    assert rec.step == 1 and state.step == 1
    assert any(not torch.equal(b0[k], v) for k, v in state.baseline.state_dict().items())
    assert any(not torch.equal(r0[k], v) for k, v in state.refiner.state_dict().items())
    assert math.isclose(rec.total, rec.l_recon1 + 0.005 * rec.l_spd + 200 * rec.l_sgr, rel_tol=1e-9)


def test_recon2_does_not_reach_student():
    data = tiny_data()
    state = build_state(tiny_cfg(), len(data))
    hq1 = state.baseline(data.lq[:4])
    masks = torch.zeros(4, 8, 16, 16, dtype=torch.float64)
    masks[:, 0] = 1
    recon2 = F.l1_loss(state.refiner(hq1.detach(), masks), data.hq[:4])
    grads = torch.autograd.grad(recon2, list(state.baseline.parameters()), allow_unused=True)
    assert all(g is None for g in grads)


def test_frozen_parts_unchanged():
    data = tiny_data()
    state = build_state(tiny_cfg(), len(data))
    before = frozen_fingerprint(state.extractor)
    for _ in range(3):
        idx = state.sampler.next()
        train_step(state, data.lq[idx], data.hq[idx])
    assert all(torch.equal(before[k], v) for k, v in state.extractor.state_dict().items())


def _objective(state, lq, hq):
    """Student objective on a batch, without updating anything."""
    cfg = state.cfg
    with torch.no_grad():
        hq1 = state.baseline(lq)
        masks = segment_batch(state, hq1)
        hq2 = state.refiner(hq1, masks)
        d = spd_sgr_losses(hq1, hq2, masks, state.extractor, mode=cfg.relation_vectorize, distance=cfg.sgr_distance)
        return (F.l1_loss(hq1, hq) + cfg.lambda1 * d.spd + cfg.lambda2 * d.sgr).item()


def test_descent_on_same_batch():
    data = tiny_data()
    for attempt in range(3):
        state = build_state(TrainConfig(dtype="float64", seed=attempt), len(data))
        lq, hq = data.lq[:4], data.hq[:4]
        before = train_step(state, lq, hq).total
        assert abs(before - _objective(build_state(state.cfg, len(data)), lq, hq)) < 1e-12
        if _objective(state, lq, hq) < before:
            return
    pytest.fail("one step did not reduce the batch loss in 3 attempts")


def test_nonfinite_aborts():
    data = tiny_data()
    state = build_state(tiny_cfg(), len(data))
    lq = data.lq[:4].clone()
    lq[0, 0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteLossError) as err:
        train_step(state, lq, data.hq[:4])
    assert err.value.record.step == 1


def test_deterministic_runs():
    data = tiny_data()
    a = train(tiny_cfg(), data)
    b = train(tiny_cfg(), data)
    assert a.history[-1]["total"] == b.history[-1]["total"]
    assert all(torch.equal(a.baseline[k], b.baseline[k]) for k in a.baseline)


def test_resume_equivalence(tmp_path):
    data = tiny_data()
    full = train(tiny_cfg(steps=8), data)
    part = train(tiny_cfg(steps=3), data)
    resumed = train(tiny_cfg(steps=8), data, resume=Checkpoint.load(part.save(tmp_path / "c.pt")))
    assert resumed.step == 8
    assert all(torch.equal(full.baseline[k], resumed.baseline[k]) for k in full.baseline)
    assert all(torch.equal(full.refiner[k], resumed.refiner[k]) for k in full.refiner)


def test_baseline_equivalence_to_plain_training():
    data = tiny_data()
    cfg = tiny_cfg(lambda1=0.0, lambda2=0.0, steps=10)
    ckpt = train(cfg, data)
    for teacher in (True, False):
        other = train(replace(cfg, train_teacher=teacher), data)
        assert all(torch.equal(ckpt.baseline[k], other.baseline[k]) for k in ckpt.baseline)


def test_run_outputs(tmp_path):
    data, val = tiny_data(), tiny_data(4, seed=1)
    cfg = tiny_cfg(checkpoint_dir=str(tmp_path), checkpoint_every=3, lambda1=0.0, lambda2=0.0)
    ckpt = train(cfg, data, val)
    assert json.loads((tmp_path / "run.json").read_text())["label"] == "baseline-only"
    assert (tmp_path / "effective_config.yaml").exists()
    lines = [json.loads(x) for x in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert len(lines) == 6 and lines[-1]["val_psnr1"] is not None and lines[-1]["val_psnr2"] is not None
    assert all(math.isfinite(x["total"]) for x in lines)
    loaded = Checkpoint.load(tmp_path / "last.pt")
    assert loaded.step == ckpt.step and loaded.train_config == cfg
    assert not list(tmp_path.glob("*.tmp"))


def test_checkpoint_version_check(tmp_path):
    ckpt = train(tiny_cfg(steps=1), tiny_data())
    ckpt.version = 99
    ckpt.save(tmp_path / "c.pt")
    with pytest.raises(ValueError):
        Checkpoint.load(tmp_path / "c.pt")


def test_epochs_schedule():
    ckpt = train(tiny_cfg(epochs=2), tiny_data(n=12))
    assert ckpt.step == 6


def test_evaluate_student_is_pure_and_isolated():
    data = tiny_data(4)
    ckpt = train(tiny_cfg(steps=2), data)
    seg, ref = Segmenter.calls, Refiner.forward_calls
    a = evaluate(ckpt, data, "student")
    b = evaluate(ckpt, data, "student")
    assert a == b
    assert Segmenter.calls == seg and Refiner.forward_calls == ref
    t = evaluate(ckpt, data, "teacher")
    assert Refiner.forward_calls > ref and Segmenter.calls > seg and t["which"] == "teacher"


def test_evaluate_untrained_equals_input_psnr():
    data = tiny_data(4)
    ckpt = train(tiny_cfg(steps=0), data)
    report = evaluate(ckpt, data, "student")
    expected = np.mean([psnr(a, b) for a, b in zip(data.lq.numpy(), data.hq.numpy())])
    assert abs(report["psnr"] - expected) < 1e-9


def test_evaluate_rejects():
    data = tiny_data(4)
    ckpt = train(tiny_cfg(steps=1), data)
    with pytest.raises(ValueError):
        evaluate(ckpt, data, "both")
    with pytest.raises(ValueError):
        evaluate(ckpt, PairedData(data.lq[:0], data.hq[:0], []), "student")


def test_train_from_manifest(tmp_path):
    splits = make_splits(tmp_path, DegradationSpec("noise"), n_train=4, n_val=2, size=16)
    cfg = replace(
        tiny_cfg(steps=2),
        manifest=str(splits["train"].root / "manifest.json"),
        val_manifest=str(splits["val"].root / "manifest.json"),
    )
    ckpt = train(cfg)
    assert ckpt.step == 2 and ckpt.history[-1]["val_psnr1"] > 0


def test_restore_identity_at_init():
    data = tiny_data(4)
    state = build_state(tiny_cfg(), 4)
    assert torch.equal(restore(state.baseline, data.lq), data.lq.clamp(0, 1))
