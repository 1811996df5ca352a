import pytest
import torch

from neurovasc.fusion import BRANCHES, CDA2F, MSC2F, Cda2fConfig, Msc2fConfig

from conftest import randn


def _msc(c=4, s=(4, 4, 4)):
    return MSC2F(Msc2fConfig(channels=c, spatial_shape=s)).double().eval()


def _cda(c=4, s=(4, 4, 4), **kw):
    return CDA2F(Cda2fConfig(channels=c, spatial_shape=s, axial_heads=2, **kw)).double().eval()


def test_msc2f_shape():
    m = _msc()
    assert m(randn(2, 4, 4, 4, 4)).shape == (2, 4, 4, 4, 4)


def test_msc2f_composite_stacks_input_edge_and_frequency_tokens():
    m = _msc()
    x = randn(1, 4, 4, 4, 4)
    f_aspp, comp = m.tokens(x)
    assert comp.shape[1] == 12
    assert torch.equal(comp[:, :4], x)
    assert torch.allclose(comp[:, 4:8], m.log(f_aspp))
    assert torch.allclose(comp[:, 8:], m.fsa(f_aspp))


def test_msc2f_output_splits_into_two_projections():
    m = _msc()
    x = randn(1, 4, 4, 4, 4, seed=1)
    with torch.no_grad():
        m.proj_refined.weight.zero_()
        m.proj_refined.bias.zero_()
    assert torch.allclose(m(x), m.proj_aspp(m.aspp(x)))


def test_msc2f_refined_path_matches_manual_composition():
    m = _msc()
    x = randn(1, 4, 4, 4, 4, seed=2)
    with torch.no_grad():
        m.proj_aspp.weight.zero_()
        m.proj_aspp.bias.zero_()
    f = m.aspp(x)
    comp = torch.cat([x, m.log(f), m.fsa(f)], 1)
    manual = m.proj_refined(m.restore(m.eca(m.depthwise(comp))))
    assert torch.allclose(m(x), manual)


def test_msc2f_rejects_wrong_channels():
    with pytest.raises(ValueError, match="MSC2F"):
        _msc()(randn(1, 3, 4, 4, 4))


def test_cda2f_eval_matches_manual_composition():
    m = _cda()
    with torch.no_grad():
        m.fusion_scale.fill_(0.7)
    x = randn(1, 4, 4, 4, 4, seed=3)
    parts = m.involution(x) + m.fsa(x) + m.spherical(x)
    manual = m.axial(x + 0.7 * parts + m.convnext(x))
    assert torch.allclose(m(x), manual, atol=1e-12)


def test_cda2f_full_drop_path_reduces_to_axial_of_input():
    m = _cda(drop_path_rate=1.0).train()
    x = randn(2, 4, 4, 4, 4)
    assert torch.allclose(m(x), m.axial(x))


def test_cda2f_training_is_reproducible_with_generator():
    m = _cda(drop_path_rate=0.5).train()
    x = randn(4, 4, 4, 4, 4)
    a = m(x, generator=torch.Generator().manual_seed(5))
    b = m(x, generator=torch.Generator().manual_seed(5))
    assert torch.equal(a, b)


@pytest.mark.parametrize("drop", BRANCHES)
def test_cda2f_branch_toggle_removes_branch(drop):
    keep = tuple(b for b in BRANCHES if b != drop)
    full, part = _cda(), _cda(branches=keep)
    assert getattr(part, drop) is None
    n_full = sum(p.numel() for p in full.parameters())
    n_part = sum(p.numel() for p in part.parameters())
    assert n_part < n_full
    assert part(randn(1, 4, 4, 4, 4)).shape == (1, 4, 4, 4, 4)


def test_cda2f_needs_a_branch():
    with pytest.raises(ValueError):
        Cda2fConfig(channels=4, spatial_shape=(4, 4, 4), branches=())
    with pytest.raises(ValueError):
        Cda2fConfig(channels=4, spatial_shape=(4, 4, 4), branches=("wavelet",))


def test_fusion_modules_run_at_other_spatial_sizes():
    x = randn(1, 4, 6, 2, 8)
    assert _msc()(x).shape == x.shape
    assert _cda()(x).shape == x.shape
