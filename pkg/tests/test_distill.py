import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from samdistill.core import check_gradient, reference
from samdistill.distill import (
    DegenerateRelationError,
    PerceptualConfig,
    PerceptualExtractor,
    frozen_fingerprint,
    mask_guided_features,
    perceptual_features,
    relation_matrix,
    sample_sgr,
    sgr_loss,
    smooth_l1,
    spd_sgr_losses,
    vectorize,
)

t64 = lambda a: torch.as_tensor(np.asarray(a, dtype=np.float64))


@pytest.fixture(scope="module")
def ext():
    return PerceptualExtractor(PerceptualConfig(seed=0)).double()


# smooth L1


def test_smooth_l1_examples():
    z = torch.zeros(4, dtype=torch.float64)
    assert smooth_l1(z, z).item() == 0.0
    assert smooth_l1(z + 0.5, z).item() == 0.125
    assert smooth_l1(z + 2, z).item() == 1.5
    got = smooth_l1(t64([0.2, 1.0, 3.0]), t64([0, 0, 0])).item()
    assert abs(got - (0.02 + 0.5 + 2.5) / 3) < 1e-12


def test_smooth_l1_shape_mismatch():
    with pytest.raises(ValueError):
        smooth_l1(torch.zeros(3), torch.zeros(4))


@given(arrays(np.float64, 7, elements=st.floats(-4, 4)), arrays(np.float64, 7, elements=st.floats(-4, 4)))
def test_smooth_l1_oracle_and_sign(a, b):
    got = smooth_l1(t64(a), t64(b)).item()
    assert abs(got - reference.smooth_l1_loop(a, b)) < 1e-12
    assert got >= 0
    if np.array_equal(a, b):
        assert got == 0
    elif np.max(np.abs(a - b)) > 1e-100:  # smaller gaps underflow once squared
        assert got > 0


def test_smooth_l1_c1_at_boundary():
    def g(v):
        x = torch.tensor([v], dtype=torch.float64, requires_grad=True)
        smooth_l1(x, torch.zeros(1, dtype=torch.float64)).backward()
        return x.grad.item()

    assert abs(g(1 - 1e-12) - g(1 + 1e-12)) < 1e-9
    assert abs(g(-1 + 1e-12) - g(-1 - 1e-12)) < 1e-9


# perceptual extractor


def test_feature_shape(ext):
    assert perceptual_features(torch.rand(3, 64, 64, dtype=torch.float64), ext).shape == (512, 8, 8)


def test_fixed_random_deterministic():
    x = torch.rand(1, 3, 16, 16)
    a = PerceptualExtractor(PerceptualConfig(seed=3))(x)
    b = PerceptualExtractor(PerceptualConfig(seed=3))(x)
    assert torch.equal(a, b)


def test_extractor_is_frozen(ext):
    before = frozen_fingerprint(ext)
    x = torch.rand(1, 3, 16, 16, dtype=torch.float64, requires_grad=True)
    perceptual_features(x, ext).sum().backward()
    assert x.grad.abs().sum() > 0
    assert all(p.grad is None and not p.requires_grad for p in ext.parameters())
    ext.train()
    assert not ext.training
    assert all(torch.equal(before[k], v) for k, v in ext.state_dict().items())


def test_extractor_rejects_odd_size(ext):
    with pytest.raises(ValueError):
        ext(torch.rand(1, 3, 12, 16, dtype=torch.float64))


def test_pretrained_missing_weights(tmp_path):
    with pytest.raises(FileNotFoundError):
        PerceptualExtractor(PerceptualConfig(kind="pretrained", weights_path=str(tmp_path / "none.pt")))


def test_pretrained_loads_torchvision_layout(tmp_path):
    src = PerceptualExtractor(PerceptualConfig(arch="vgg16", seed=4))
    state = {k: v for k, v in src.state_dict().items() if k.startswith("features.")}
    state["classifier.0.weight"] = torch.zeros(2, 2)  # extra keys are ignored
    torch.save(state, tmp_path / "vgg.pt")
    loaded = PerceptualExtractor(PerceptualConfig(kind="pretrained", weights_path=str(tmp_path / "vgg.pt")))
    x = torch.rand(1, 3, 16, 16)
    assert torch.equal(loaded(x), src(x))


@pytest.mark.parametrize("kw", [dict(out_channels=256), dict(stride=4), dict(kind="other"), dict(arch="resnet")])
def test_perceptual_config_rejects(kw):
    with pytest.raises(ValueError):
        PerceptualConfig(**kw)


# masked features and relations


def test_mask_guided_features():
    f = torch.rand(5, 4, 4, dtype=torch.float64) + 0.1
    masks = torch.zeros(3, 4, 4, dtype=torch.float64)
    masks[0] = 1
    masks[2] = torch.from_numpy((np.indices((4, 4)).sum(0) % 2).astype(np.float64))
    out = mask_guided_features(f, masks)
    assert out.shape == (3, 5, 4, 4)
    assert torch.equal(out[0], f)
    assert not out[1].any()
    support = masks[2].bool()
    for c in range(5):
        assert (out[2, c][support] != 0).all() and (out[2, c][~support] == 0).all()


def test_mask_guided_dim_mismatch():
    with pytest.raises(ValueError):
        mask_guided_features(torch.zeros(2, 4, 4), torch.zeros(1, 2, 2))


def test_relation_examples():
    v = torch.rand(4, dtype=torch.float64) + 0.1
    assert abs(relation_matrix(torch.stack([v, v]))[0, 1].item() - 1) < 1e-12
    assert abs(relation_matrix(torch.stack([v, -v]))[0, 1].item() + 1) < 1e-12


def test_relation_disjoint_partition_toy():
    f = torch.rand(3, 4, 4, dtype=torch.float64) + 0.1
    m = torch.zeros(2, 4, 4, dtype=torch.float64)
    m[0, :, :2] = 1
    m[1, :, 2:] = 1
    r = relation_matrix(mask_guided_features(f, m))
    assert r[0, 1].item() == 0.0


def test_relation_degenerate():
    with pytest.raises(DegenerateRelationError):
        relation_matrix(torch.zeros(3, 4, dtype=torch.float64))
    with pytest.raises(DegenerateRelationError):
        relation_matrix(torch.ones(1, 4, dtype=torch.float64))
    with pytest.raises(DegenerateRelationError):
        relation_matrix(torch.tensor([[1.0, 0], [0, 1], [0, 0]], dtype=torch.float64))


@given(arrays(np.float64, (5, 6), elements=st.floats(-3, 3)).filter(lambda a: (np.linalg.norm(a, axis=1) > 1e-3).all()))
def test_relation_properties(v):
    r = relation_matrix(t64(v))
    assert torch.equal(r, r.T)
    assert r.abs().max() <= 1 + 1e-6
    np.testing.assert_allclose(r.numpy(), reference.relation_loop(list(v)), atol=1e-12)


def test_vectorize_modes():
    f = torch.arange(2 * 3 * 2 * 2, dtype=torch.float64).reshape(2, 3, 2, 2)
    m = torch.tensor([[[1, 1], [0, 0]], [[1, 0], [0, 0]]], dtype=torch.float64)
    assert vectorize(f, m, "flatten").shape == (2, 12)
    pooled = vectorize(f * m[:, None], m, "pool")
    assert pooled.shape == (2, 3)
    assert pooled[1, 0].item() == f[1, 0, 0, 0].item()
    with pytest.raises(ValueError):
        vectorize(f, None, "pool")


# SGR loss


def test_sgr_examples():
    r1 = t64([[1, 0.8], [0.8, 1]])
    r2 = t64([[1, 0.3], [0.3, 1]])
    assert sgr_loss(r1, r1).item() == 0
    assert abs(sgr_loss(r1, r2).item() - 0.5) < 1e-12
    assert abs(sgr_loss(r1, r2, "squared").item() - 0.25) < 1e-12


def test_sgr_rejects():
    with pytest.raises(ValueError):
        sgr_loss(torch.eye(2), torch.eye(3))
    with pytest.raises(ValueError):
        sgr_loss(torch.eye(1), torch.eye(1))
    with pytest.raises(ValueError):
        sgr_loss(torch.eye(2), torch.eye(2), "cube")


@given(st.integers(2, 6), st.integers(0, 10_000))
def test_sgr_properties(n, seed):
    rng = np.random.default_rng(seed)
    r1, r2 = t64(rng.uniform(-1, 1, (n, n))), t64(rng.uniform(-1, 1, (n, n)))
    p = torch.from_numpy(rng.permutation(n))
    for dist in ("abs", "squared"):
        val = sgr_loss(r1, r2, dist).item()
        assert 0 <= val <= 4 and abs(val - sgr_loss(r2, r1, dist).item()) < 1e-15
        assert abs(val - sgr_loss(r1[p][:, p], r2[p][:, p], dist).item()) < 1e-9
    assert sgr_loss(r1, r2).item() <= 2
    assert abs(sgr_loss(r1, r2).item() - reference.sgr_loop(r1.numpy(), r2.numpy())) < 1e-12


# combined losses


def _masks(b, h, w, seed=0):
    rng = np.random.default_rng(seed)
    return torch.from_numpy((rng.random((b, 4, h, w)) < 0.5).astype(np.float64))


def test_equal_images_give_zero(ext):
    x = torch.rand(2, 3, 16, 16, dtype=torch.float64)
    out = spd_sgr_losses(x, x.clone(), _masks(2, 16, 16), ext, mode="pool")
    assert out.spd.item() == 0 and abs(out.sgr.item()) < 1e-12


def test_no_gradient_to_teacher(ext):
    x1 = torch.rand(1, 3, 16, 16, dtype=torch.float64, requires_grad=True)
    x2 = torch.rand(1, 3, 16, 16, dtype=torch.float64, requires_grad=True)
    out = spd_sgr_losses(x1, x2, _masks(1, 16, 16), ext, mode="pool")
    (out.spd + out.sgr).backward()
    assert x2.grad is None
    assert x1.grad.abs().sum() > 0


@pytest.mark.parametrize("mode", ["pool", "flatten"])
@pytest.mark.parametrize("dist", ["abs", "squared"])
def test_sgr_gradient_matches_finite_differences(ext, mode, dist):
    rng = np.random.default_rng(7)
    hq1 = torch.from_numpy(rng.random((1, 3, 16, 16)))
    hq2 = torch.from_numpy(rng.random((1, 3, 16, 16)))
    masks = _masks(1, 16, 16, 3)
    rep = check_gradient(lambda x: spd_sgr_losses(x, hq2, masks, ext, mode=mode, distance=dist, with_spd=False).sgr, hq1)
    assert rep.max_rel_error < 1e-3


def test_skips_when_masks_degenerate(ext):
    x1 = torch.rand(2, 3, 16, 16, dtype=torch.float64)
    x2 = torch.rand(2, 3, 16, 16, dtype=torch.float64)
    masks = torch.zeros(2, 4, 16, 16, dtype=torch.float64)
    masks[:, 0] = 1  # a single mask per sample: nothing to relate
    out = spd_sgr_losses(x1, x2, masks, ext)
    assert out.sgr_skips == 2 and out.sgr.item() == 0


def test_sample_sgr_drops_masks_lost_by_downsampling(ext):
    f1 = torch.rand(512, 2, 2, dtype=torch.float64)
    f2 = torch.rand(512, 2, 2, dtype=torch.float64)
    low = torch.zeros(3, 2, 2, dtype=torch.float64)
    low[0, 0] = 1
    low[1, 1] = 1
    assert sample_sgr(f1, f2, low, "pool") is not None
    low[1] = 0
    assert sample_sgr(f1, f2, low, "pool") is None
