import numpy as np
import pytest
import torch

from blindvr.cfc import (
    FeatureCompletion,
    GlobalAdapter,
    HierarchicalAugmentation,
    MixtureOfResidualExperts,
    ResidualEnhance,
    ResidualExpert,
    ScaleCrossAttention,
    blend_residual,
    composite,
    gate_weights,
    more_combine,
    resize_mask,
    scale_gate,
    split_by_mask,
)

from conftest import finite_difference_check, redraw_parameters, tiny_cfc_config

D = torch.float64


def _rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=D)


def _binary(*shape, seed=0):
    return (torch.rand(*shape, generator=torch.Generator().manual_seed(seed), dtype=D) > 0.5).to(D)


# --- mask split -------------------------------------------------------------

def test_split_extremes():
    x = _rand(2, 3, 8, 8)
    intact, corrupted = split_by_mask(x, torch.zeros(2, 1, 8, 8, dtype=D))
    assert torch.equal(intact, x) and torch.equal(corrupted, torch.zeros_like(x))
    intact, corrupted = split_by_mask(x, torch.ones(2, 1, 8, 8, dtype=D))
    assert torch.equal(corrupted, x) and torch.equal(intact, torch.zeros_like(x))


def test_split_partition_is_exact():
    x = torch.rand(3, 3, 16, 16, dtype=torch.float32)
    intact, corrupted = split_by_mask(x, _binary(3, 1, 16, 16).float())
    assert torch.equal(intact + corrupted, x)
    xn = np.random.default_rng(0).random((4, 4, 3))
    mn = (np.random.default_rng(1).random((4, 4)) > 0.5).astype(float)
    a, b = split_by_mask(xn, mn)
    assert np.array_equal(a + b, xn)


def test_split_shape_mismatch():
    with pytest.raises(ValueError):
        split_by_mask(torch.zeros(1, 3, 8, 8), torch.zeros(1, 1, 4, 4))


# --- scale-wise cross-attention -------------------------------------------

def test_zero_mask_gives_exact_zero():
    sca = ScaleCrossAttention(8, 6).double()
    out = sca(_rand(2, 8, 4, 4), _rand(2, 6, 4, 4, seed=1), torch.zeros(2, 1, 16, 16, dtype=D), 1.0)
    assert torch.equal(out, torch.zeros_like(out))


def test_linear_in_delta():
    sca = ScaleCrossAttention(8, 6).double()
    args = (_rand(2, 8, 4, 4), _rand(2, 6, 4, 4, seed=1), torch.rand(2, 1, 16, 16, dtype=D))
    one = sca(*args, 1.0)
    two = sca(*args, 2.0)
    assert torch.allclose(two, 2 * one, rtol=0, atol=1e-7)


def test_single_foundation_token_returns_value():
    sca = ScaleCrossAttention(8, 6).double()
    ff = _rand(1, 6, 1, 1, seed=2)
    attended = sca.attend(_rand(1, 8, 1, 1), ff)
    expected = sca.v(ff.flatten(2).transpose(1, 2)).transpose(1, 2).reshape(1, 8, 1, 1)
    out = scale_gate(attended, torch.ones(1, 1, 4, 4, dtype=D), 1.0)
    assert torch.allclose(out, expected, atol=1e-12)


def test_scale_mismatch_rejected():
    sca = ScaleCrossAttention(4, 4)
    with pytest.raises(ValueError):
        sca(torch.zeros(1, 4, 4, 4), torch.zeros(1, 4, 2, 2), torch.ones(1, 1, 4, 4), 1.0)


def test_resize_mask_bilinear_keeps_soft_values():
    m = torch.zeros(1, 1, 4, 4)
    m[..., :2] = 1
    r = resize_mask(m, (2, 2))
    assert r.min() >= 0 and r.max() <= 1
    assert torch.equal(resize_mask(m, (4, 4)), m)


# --- blend ----------------------------------------------------------------

def test_blend_examples():
    f = _rand(1, 4, 3, 3)
    assert torch.equal(blend_residual(torch.zeros_like(f), f, 0.0), f)
    assert torch.allclose(blend_residual(2 * f, f, 0.5), 1.5 * f, atol=1e-15)
    gated = scale_gate(_rand(1, 4, 3, 3, seed=1), torch.zeros(1, 1, 12, 12, dtype=D), 1.0)
    assert torch.equal(blend_residual(gated, f, 1.0), torch.zeros_like(f))
    with pytest.raises(ValueError):
        blend_residual(f, f[..., :2], 0.5)


def test_zero_lambda_bypasses_augmentation():
    torch.manual_seed(0)
    ha = HierarchicalAugmentation(tiny_cfc_config()).double()
    with torch.no_grad():
        ha.lambda_raw.fill_(-1e4)
    x = torch.rand(2, 3, 16, 16, dtype=D)
    m = _binary(2, 1, 16, 16)
    foundation = [_rand(2, 4, 4, 4), _rand(2, 8, 2, 2, seed=1)]
    pyramid = ha.encode(x, m)
    aug, fused = ha(x, m, foundation)
    for a, p in zip(aug, pyramid):
        assert torch.equal(a, p)
    # equal inputs can reach the conv with different strides; allow ulp noise
    assert torch.allclose(fused, ha.decode(pyramid), rtol=0, atol=1e-12)


def test_initial_blend_params():
    ha = HierarchicalAugmentation(tiny_cfc_config())
    assert torch.allclose(ha.lambdas, torch.full((2,), 0.5))
    assert torch.allclose(ha.deltas, torch.ones(2), atol=1e-7)


# --- gate and experts -------------------------------------------------------

def test_gate_examples():
    assert torch.allclose(gate_weights(torch.full((1, 3), 2.5)), torch.full((1, 3), 1 / 3))
    w = gate_weights(torch.tensor([[10.0, -10.0]], dtype=D))
    assert torch.allclose(w, torch.tensor([[1.0, 0.0]], dtype=D), atol=1e-4)


def test_adapter_zero_input_is_deterministic():
    a = GlobalAdapter(6, 4)
    z = torch.zeros(1, 6)
    assert torch.equal(a(z), a(z))


def test_expert_with_zero_value_is_identity():
    torch.manual_seed(0)
    e = ResidualExpert(4, 3).double()
    with torch.no_grad():
        e.v.weight.zero_()
        e.v.bias.zero_()
    fb = _rand(2, 4, 3, 3)
    assert torch.equal(e(fb, _rand(1, 3, seed=1)), fb)


def test_expert_rejects_prompt_width():
    with pytest.raises(ValueError):
        ResidualExpert(4, 3)(torch.zeros(1, 4, 2, 2), torch.zeros(2, 5))


def test_single_expert_ignores_gate():
    torch.manual_seed(0)
    more = MixtureOfResidualExperts(4, 3, 1).double()
    fb, p = _rand(1, 4, 3, 3), _rand(2, 3, seed=1)
    w = gate_weights(torch.tensor([[7.3]], dtype=D))
    assert torch.equal(more(fb, p, w), more.experts[0](fb, p))


def test_more_combine_cases():
    a, b = _rand(1, 4, 3, 3), _rand(1, 4, 3, 3, seed=1)
    assert torch.equal(more_combine([a, b], torch.tensor([1.0, 0.0], dtype=D)), a)
    assert torch.allclose(more_combine([a, b], torch.tensor([0.5, 0.5], dtype=D)), (a + b) / 2, atol=1e-15)
    with pytest.raises(ValueError):
        more_combine([a, b], torch.ones(3, dtype=D))


@pytest.mark.parametrize("n_experts", [1, 2, 3])
def test_more_output_is_convex(n_experts):
    for seed in range(100):
        outs = [_rand(1, 3, 4, 4, seed=seed * 10 + i) for i in range(n_experts)]
        w = gate_weights(_rand(1, n_experts, seed=seed + 5000) * 3)
        y = more_combine(outs, w)
        stack = torch.stack(outs)
        assert torch.all(y >= stack.min(0).values - 1e-12)
        assert torch.all(y <= stack.max(0).values + 1e-12)


# --- residual enhancement ---------------------------------------------------

def test_enhance_contracts_every_nonzero_channel():
    torch.manual_seed(0)
    enh = ResidualEnhance(6, 4).double()
    x = _rand(2, 6, 3, 3)
    x[:, 2] = 0
    y = enh(x, _rand(1, 4, seed=1))
    nz = x != 0
    assert torch.all(y[nz].abs() < x[nz].abs())
    assert torch.equal(y[~nz], torch.zeros_like(y[~nz]))


def test_enhance_saturated_bias_recovers_input():
    torch.manual_seed(0)
    enh = ResidualEnhance(6, 4).double()
    with torch.no_grad():
        enh.mlp[-1].weight.zero_()
        enh.mlp[-1].bias.fill_(20.0)
    x = _rand(2, 6, 3, 3)
    y = enh(x, _rand(1, 4, seed=1))
    assert torch.all((y - x).abs() <= 1e-6 * x.abs())


def test_enhance_zero_input():
    enh = ResidualEnhance(6, 4).double()
    z = torch.zeros(1, 6, 2, 2, dtype=D)
    assert torch.equal(enh(z, _rand(1, 4)), z)


# --- full stack -----------------------------------------------------------

def _foundation(n, seed=0):
    return [_rand(n, 4, 4, 4, seed=seed), _rand(n, 8, 2, 2, seed=seed + 1)]


def test_composite_keeps_unmasked_pixels():
    frames = torch.rand(2, 3, 8, 8, dtype=D)
    pred = torch.rand(2, 3, 8, 8, dtype=D) * 3 - 1
    mask = _binary(2, 1, 8, 8)
    out = composite(frames, pred, mask)
    keep = (mask == 0).expand_as(frames)
    assert torch.equal(out[keep], frames[keep])
    assert out.min() >= 0 and out.max() <= 1


def test_completion_zero_mask_returns_input(tiny_completion):
    frames = torch.rand(4, 3, 16, 16, dtype=D)
    out = tiny_completion(frames, torch.zeros(4, 1, 16, 16, dtype=D), _foundation(4), n_local=3)
    assert out.recovered.shape == (3, 3, 16, 16)
    assert torch.equal(out.recovered, frames[:3])
    assert out.gate.shape == (1, 2)


def test_completion_variants_run():
    for kw in (dict(use_more=False), dict(use_augmentation=False), dict(use_enhance=False), dict(gate="linear")):
        torch.manual_seed(0)
        model = FeatureCompletion(tiny_cfc_config(**kw)).double()
        out = model(torch.rand(2, 3, 16, 16, dtype=D), _binary(2, 1, 16, 16), _foundation(2))
        assert torch.isfinite(out.prediction).all()


def test_parameter_groups_partition():
    model = FeatureCompletion(tiny_cfc_config())
    groups = model.parameter_groups()
    ids = [id(p) for ps in groups.values() for p in ps]
    assert len(ids) == len(set(ids)) == len(list(model.parameters()))


def test_end_to_end_gradients(tiny_completion):
    g = torch.Generator().manual_seed(0)
    frames = torch.rand(3, 3, 8, 8, generator=g, dtype=D)
    clean = torch.rand(3, 3, 8, 8, generator=g, dtype=D)
    mask = torch.zeros(3, 1, 8, 8, dtype=D)
    mask[:, :, 2:6, 1:7] = 1
    foundation = [torch.rand(3, 4, 2, 2, generator=g, dtype=D), torch.rand(3, 8, 1, 1, generator=g, dtype=D)]
    model = redraw_parameters(tiny_completion, seed=7)

    def fn():
        out = model(frames, mask, foundation, n_local=2)
        return ((out.prediction - clean[:2]) ** 2).mean()

    errors = finite_difference_check(fn, list(model.named_parameters()))
    assert max(errors.values()) < 1e-4, {k: v for k, v in errors.items() if v >= 1e-4}
