import numpy as np
import pytest
import torch

from splathuman.anatomy import AnatomyConfig
from splathuman.errors import ConfigError, InputError, NumericError, ParameterDomainError
from splathuman.gaussians import Kind, activate_raw_params
from splathuman.twins import (
    ModelConfig,
    Reconstructor,
    TwinsConfig,
    TwinsUNet,
    decode_gaussians,
    encode_image,
    reconstruct,
    twins_forward,
)

TINY = TwinsConfig(resolution=32, widths=(8, 16, 16, 16, 16), base_width=8, shape_width=16, groups=4,
                   attn_heads=2)
TINY_ANATOMY = AnatomyConfig(crop_size=32, patch_size=8, width=16, n_query=4, n_blocks=1, heads=2)


def tiny_twins(seed=0, **changes):
    torch.manual_seed(seed)
    cfg = TwinsConfig(**{**TINY.__dict__, **changes})
    return TwinsUNet(cfg)


def inputs(seed=0, batch=1):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(batch, 8, 32, 32, generator=g), torch.randn(batch, 4, 16, generator=g)


def test_config_validation():
    with pytest.raises(ConfigError):
        TwinsConfig(resolution=100).validate()
    with pytest.raises(ConfigError):
        TwinsConfig(widths=(64, 128)).validate()
    with pytest.raises(ConfigError):
        ModelConfig(TINY, AnatomyConfig(width=32, heads=2)).validate()


def test_encode_image_contract():
    model = TwinsUNet(TwinsConfig(widths=(8, 8, 8, 8, 8), base_width=64, attn_stages=()))
    img = torch.rand(128, 128, 3, generator=torch.Generator().manual_seed(0))
    f = encode_image(img, model)
    assert f.shape == (1, 64, 128, 128)
    assert torch.equal(f, encode_image(img.clone(), model))
    assert (encode_image(img + 0.1, model) - f).abs().max() > 0
    with pytest.raises(ConfigError):
        encode_image(torch.rand(64, 64, 3), model)


def test_activation_names_and_shapes():
    model = tiny_twins()
    f_c, f_g = inputs()
    acts = twins_forward(f_c, f_g, model)
    for k in range(6):
        assert f"F_c{k}" in acts and f"F_n{k}" in acts and f"F_f{k}" in acts
    assert acts.F_c0.shape == acts.F_n0.shape == acts.F_f0.shape
    assert acts.raw_c.shape == acts.raw_n.shape == (1, 32, 32, 14)
    assert all(torch.isfinite(acts[name]).all() for name in acts.names())


def test_zeroed_normal_middle_block_feeds_color_features():
    model = tiny_twins()
    f_c, f_g = inputs()
    acts = twins_forward(f_c, f_g, model, hooks={"F_n0": torch.zeros_like})
    assert torch.equal(acts.UB1_in_c, acts.F_c0)
    assert torch.equal(acts.UB1_in_n, acts.F_c0)


def test_fusion_stages_are_sums():
    model = tiny_twins()
    acts = twins_forward(*inputs(), model)
    for k in range(6):
        assert torch.equal(acts[f"F_f{k}"], acts[f"F_c{k}"] + acts[f"F_n{k}"])
    for k in range(2, 6):
        assert torch.equal(acts[f"UB{k}_in_c"], acts[f"F_f{k - 1}"])


def test_without_fusion_texture_ignores_normal_net():
    model = tiny_twins(fusion=False)
    f_c, f_g = inputs()
    ref = twins_forward(f_c, f_g, model).raw_c
    with torch.no_grad():
        for p in model.r_n.parameters():
            p.zero_()
    assert torch.equal(twins_forward(f_c, f_g, model).raw_c, ref)
    assert "F_f0" not in twins_forward(f_c, f_g, model)


def _cross_grad_norm(model):
    f_c, f_g = inputs(3)
    model.zero_grad()
    acts = twins_forward(f_c, f_g, model)
    acts.raw_n.square().mean().backward()
    return sum(float(p.grad.norm()) for p in model.r_c.parameters() if p.grad is not None)


def test_cross_gradient_coupling():
    assert _cross_grad_norm(tiny_twins(fusion=True)) > 0
    assert _cross_grad_norm(tiny_twins(fusion=False)) == 0.0


@pytest.mark.parametrize("fusion", [True, False])
def test_swapping_twins_swaps_outputs(fusion):
    model = tiny_twins(fusion=fusion)
    f_c, f_g = inputs(1)
    a = twins_forward(f_c, f_g, model)
    c_state = {k: v.clone() for k, v in model.r_c.state_dict().items()}
    n_state = {k: v.clone() for k, v in model.r_n.state_dict().items()}
    model.r_c.load_state_dict(n_state)
    model.r_n.load_state_dict(c_state)
    b = twins_forward(f_c, f_g, model)
    assert torch.equal(a.raw_c, b.raw_n) and torch.equal(a.raw_n, b.raw_c)


def test_no_nan_over_100_random_forwards():
    model = tiny_twins()
    with torch.no_grad():
        for seed in range(100):
            f_c, f_g = inputs(seed, batch=1)
            acts = twins_forward(f_c * 3, f_g * 3, model)
            assert torch.isfinite(acts.raw_c).all() and torch.isfinite(acts.raw_n).all()


def test_non_finite_activation_names_stage():
    model = tiny_twins()
    with pytest.raises(NumericError) as exc:
        twins_forward(*inputs(), model, hooks={"F_c2": lambda x: x * float("nan")})
    assert exc.value.where == "F_c2"
    with pytest.raises(InputError):
        twins_forward(torch.zeros(2, 8, 32, 32), torch.zeros(3, 4, 16), model)


def test_decode_gaussians_contract():
    raw = torch.randn(64, 64, 14, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    gs = decode_gaussians(raw, Kind.NORMAL)
    assert len(gs) == 4096 and gs.kind == Kind.NORMAL
    gs.check()
    expected = activate_raw_params(raw[2, 3].numpy()).as_vector().astype(np.float32)
    np.testing.assert_array_equal(gs.params[131], expected)
    zero = decode_gaussians(torch.zeros(8, 8, 14))
    ref = activate_raw_params(np.zeros(14)).as_vector().astype(np.float32)
    assert all(np.array_equal(row, ref) for row in zero.params)
    bad = raw.clone()
    bad[5, 5, 2] = float("inf")
    with pytest.raises(ParameterDomainError):
        decode_gaussians(bad)
    with pytest.raises(InputError):
        decode_gaussians(torch.zeros(8, 8, 13))


def test_initial_centres_sit_on_pixel_grid():
    model = tiny_twins()
    model.r_c.head.weight.data.zero_()
    model.r_n.head.weight.data.zero_()
    acts = twins_forward(*inputs(), model)
    g = decode_gaussians(acts.raw_c[0])
    centres = g.centers.reshape(32, 32, 3)
    ps = 2.0 / 32
    # pixels beyond the 0.9 centre bound clamp to it
    grid = np.clip((np.arange(32) - 16) * ps, -0.8991, 0.8991)
    np.testing.assert_allclose(centres[0, :, 0], grid, atol=1e-4)
    np.testing.assert_allclose(centres[:, 0, 1], -grid, atol=1e-4)
    # checkerboard: front head on even pixels, back head on odd pixels
    z = centres[..., 2]
    assert z[0, 0] == pytest.approx(0.05, abs=1e-6) and z[0, 1] == pytest.approx(-0.05, abs=1e-6)
    np.testing.assert_allclose(g.opacities, 0.1, atol=1e-6)
    np.testing.assert_allclose(g.scales, 0.5 * ps, rtol=1e-5)


def test_reconstruct_full_resolution(scan128):
    torch.manual_seed(0)
    cfg = ModelConfig(TwinsConfig(widths=(8, 8, 16, 16, 16), base_width=8, shape_width=16, groups=4,
                                  attn_heads=2), TINY_ANATOMY)
    model = Reconstructor(cfg).eval()
    img = torch.from_numpy(scan128.front_image)
    g_c, g_n = reconstruct(img, scan128.label_mask, model)
    assert len(g_c) == len(g_n) == 128 * 128
    assert g_c.kind == Kind.TEXTURE and g_n.kind == Kind.NORMAL
    g_c.check()
    g_n.check()
    again = reconstruct(img, scan128.label_mask, model)
    assert again[0] == g_c and again[1] == g_n


def test_shape_module_ablation_zeroes_features(scan64):
    torch.manual_seed(0)
    cfg = ModelConfig(TwinsConfig(**{**TINY.__dict__, "resolution": 64}), TINY_ANATOMY, shape_module=False)
    model = Reconstructor(cfg)
    acts = model(scan64.front_image, scan64.label_mask)
    assert torch.count_nonzero(acts.F_g) == 0
    assert acts.raw_c.shape == (1, 64, 64, 14)
