import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from samdistill.core import MaskSet, resize_mask
from samdistill.models import (
    BaselineIR,
    BaselineIRConfig,
    Refiner,
    RefinerConfig,
    SPFUnit,
    SPFUnitConfig,
    baseline_forward,
    pack_masks,
    refiner_forward,
)


def _half_masks(b=2, k=8, h=16, w=16):
    m = torch.zeros(b, k, h, w, dtype=torch.float64)
    m[:, 0, :, : w // 2] = 1
    m[:, 1, :, w // 2 :] = 1
    return m


@pytest.mark.parametrize(
    "make",
    [
        lambda: BaselineIRConfig(channels=4),
        lambda: BaselineIRConfig(n_blocks=1),
        lambda: RefinerConfig(n_blocks=1),
        lambda: RefinerConfig(mask_channels=1),
        lambda: SPFUnitConfig(hidden_channels=4),
    ],
)
def test_config_invariants(make):
    with pytest.raises(ValueError):
        make()


def test_baseline_identity_at_init():
    x = torch.rand(3, 64, 64)
    assert torch.equal(baseline_forward(BaselineIR(), x), x)


@given(st.integers(8, 16), st.integers(2, 4), st.sampled_from([8, 16, 24]))
def test_baseline_shape(channels, blocks, size):
    model = BaselineIR(BaselineIRConfig(channels=channels, n_blocks=blocks))
    torch.nn.init.normal_(model.tail.weight)
    assert baseline_forward(model, torch.rand(3, size, size)).shape == (3, size, size)


def test_pack_identity_and_padding():
    m = np.zeros((2, 8, 8), bool)
    m[0, :4] = True
    m[1, 4:] = True
    ms = MaskSet(m)
    packed = pack_masks(ms, 2)
    np.testing.assert_array_equal(packed.astype(bool), m)
    wide = pack_masks(ms, 8)
    assert wide.shape == (8, 8, 8) and not wide[2:].any()


def test_pack_matches_resize():
    m = np.random.default_rng(0).random((3, 16, 16)) < 0.5
    packed = pack_masks(MaskSet(m), 4, 4, 4)
    for i in range(3):
        np.testing.assert_array_equal(packed[i].astype(bool), resize_mask(m[i], 4, 4))


def test_pack_rejects_overflow():
    with pytest.raises(ValueError):
        pack_masks(MaskSet(np.ones((3, 4, 4), bool)), 2)


def test_spf_resize_contract():
    unit = SPFUnit(11, 16, 8, SPFUnitConfig()).double()
    out = unit(torch.rand(2, 11, 64, 64, dtype=torch.float64), torch.rand(2, 16, 32, 32, dtype=torch.float64), _half_masks(h=64, w=64))
    assert out.shape == (2, 16, 32, 32)


def test_spf_ablation_is_plain_fusion():
    unit = SPFUnit(16, 16, 8, SPFUnitConfig(attention=False)).double()
    f_in, f_blk = torch.rand(1, 16, 8, 8, dtype=torch.float64), torch.rand(1, 16, 8, 8, dtype=torch.float64)
    plain = unit.fuse(torch.cat([f_in, f_blk], 1))
    assert torch.equal(unit(f_in, f_blk, _half_masks(1, h=8, w=8)), plain)


def test_spf_saturated_gate():
    unit = SPFUnit(16, 16, 8, SPFUnitConfig()).double()
    with torch.no_grad():
        unit.gate.weight.zero_()
        unit.gate.bias.fill_(60.0)
    f_in, f_blk = torch.rand(1, 16, 8, 8, dtype=torch.float64), torch.rand(1, 16, 8, 8, dtype=torch.float64)
    ungated = unit.fuse(torch.cat([f_in, f_blk], 1))
    assert (unit(f_in, f_blk, _half_masks(1, h=8, w=8)) - ungated).abs().max() < 1e-6


def test_spf_channel_mismatch():
    unit = SPFUnit(16, 16, 8, SPFUnitConfig())
    with pytest.raises(ValueError):
        unit(torch.rand(1, 15, 8, 8), torch.rand(1, 16, 8, 8), torch.zeros(1, 8, 8, 8))
    with pytest.raises(ValueError):
        unit(torch.rand(1, 16, 8, 8), torch.rand(1, 16, 8, 8), torch.zeros(1, 4, 8, 8))


@pytest.mark.parametrize("n_blocks", [2, 3, 5])
def test_refiner_units_match_blocks(n_blocks):
    ref = Refiner(RefinerConfig(n_blocks=n_blocks)).double()
    assert len(ref.spf) == len(ref.blocks) == n_blocks
    x = torch.rand(2, 3, 16, 16, dtype=torch.float64)
    out = ref(x, _half_masks())
    assert all(u.calls == 1 for u in ref.spf)
    assert torch.equal(out, x)


def test_refiner_first_unit_sees_image_and_masks():
    ref = Refiner(RefinerConfig())
    assert ref.spf[0].in_channels == 3 + 8
    assert all(u.in_channels == 16 for u in ref.spf[1:])


def test_refiner_mask_sensitivity():
    ref = Refiner(RefinerConfig()).double()
    torch.nn.init.normal_(ref.tail.weight, std=0.1)
    x = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    m = _half_masks(1).requires_grad_(True)
    ref(x, m).sum().backward()
    assert m.grad.abs().max() > 0


def test_refiner_forward_accepts_maskset():
    ref = Refiner(RefinerConfig()).double()
    torch.nn.init.normal_(ref.tail.weight, std=0.1)
    x = torch.rand(3, 16, 16, dtype=torch.float64)
    m = np.zeros((2, 16, 16), bool)
    m[0, :8] = True
    m[1, 8:] = True
    a = refiner_forward(ref, x, MaskSet(m))
    b = refiner_forward(ref, x, torch.from_numpy(pack_masks(MaskSet(m), 8)))
    assert a.shape == x.shape and torch.equal(a, b)


def test_parameters_disjoint():
    a, b = BaselineIR(), Refiner()
    assert not {id(p) for p in a.parameters()} & {id(p) for p in b.parameters()}
