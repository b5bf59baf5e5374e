import numpy as np
import pytest

from pyramid_mamba import oracles
from pyramid_mamba import tensor as T
from pyramid_mamba.anomaly import multiscale_mse_loss
from pyramid_mamba.blocks import (
    CSS,
    LEC,
    MFF,
    CssConfig,
    Decoder,
    EncoderError,
    FeaturePyramid,
    PyramidMamba,
    ResNet34Encoder,
    TinyEncoder,
    encoder_forward,
    inject_noise,
    random_resnet34_weights,
    resnet34_parameter_shapes,
)
from pyramid_mamba.pyramid import PyramidSpec
from pyramid_mamba.tensor import ShapeError


def small_cfg(channels=4, **kw):
    base = dict(kernels=(3, 5), pyramid=PyramidSpec(levels=1, chain=1), d_state=2)
    base.update(kw)
    return CssConfig(channels, **base)


def test_lec_preserves_shape_and_rejects_even_kernels():
    x = T.tensor(np.ones((2, 3, 6, 6), np.float32))
    assert LEC(3, 5)(x).shape == (2, 3, 6, 6)
    with pytest.raises(ValueError, match="odd"):
        LEC(3, 4)


@pytest.mark.parametrize(
    "use_global,use_local,fused_in",
    [(True, True, 12), (False, True, 8), (True, False, 4)],
)
def test_css_branch_widths(use_global, use_local, fused_in):
    block = CSS(small_cfg(use_global=use_global, use_local=use_local))
    assert block.fuse.weight.shape == (4, fused_in, 1, 1)
    x = T.tensor(np.random.default_rng(0).standard_normal((1, 4, 4, 4)).astype(np.float32))
    assert block(x).shape == x.shape


def test_css_needs_a_branch():
    with pytest.raises(ValueError):
        small_cfg(use_global=False, use_local=False)


def test_css_is_residual():
    block = CSS(small_cfg())
    block.fuse.weight.data[:] = 0
    block.fuse.bias.data[:] = 0
    x = T.tensor(np.random.default_rng(0).standard_normal((1, 4, 4, 4)).astype(np.float32))
    np.testing.assert_array_equal(block(x).data, x.data)


def test_css_channel_check():
    with pytest.raises(ShapeError, match="css"):
        CSS(small_cfg())(T.tensor(np.ones((1, 3, 4, 4), np.float32)))


def test_mff_downsamples_to_deepest():
    mff = MFF((2, 3, 5), (16, 8, 4), 5)
    assert mff.down_steps() == [2, 1, 0]
    rng = np.random.default_rng(0)
    feats = FeaturePyramid([rng.standard_normal((2, c, s, s)).astype(np.float32) for c, s in ((2, 16), (3, 8), (5, 4))])
    assert mff(feats).shape == (2, 5, 4, 4)
    with pytest.raises(ShapeError):
        MFF((2, 3), (12, 8), 3)


def test_tiny_encoder_zero_in_zero_out():
    feats = encoder_forward(TinyEncoder(seed=3), np.zeros((1, 3, 32, 32)))
    assert [f.shape for f in feats.levels] == [(1, 16, 8, 8), (1, 32, 4, 4), (1, 64, 2, 2)]
    assert all(not f.any() for f in feats.levels)


def test_tiny_encoder_is_seeded():
    x = np.random.default_rng(0).standard_normal((1, 3, 32, 32))
    a, b, c = TinyEncoder(1)(x), TinyEncoder(1)(x), TinyEncoder(2)(x)
    assert np.array_equal(a[2], b[2]) and not np.array_equal(a[2], c[2])


def test_resnet34_shapes_and_validation():
    w = random_resnet34_weights(0)
    feats = ResNet34Encoder(w)(np.random.default_rng(0).standard_normal((1, 3, 64, 64)))
    assert [f.shape for f in feats] == [(1, 64, 16, 16), (1, 128, 8, 8), (1, 256, 4, 4), (1, 512, 2, 2)]
    assert len(resnet34_parameter_shapes()) == len(w)
    del w["layer3.0.downsample.0.weight"]
    with pytest.raises(EncoderError, match="missing"):
        ResNet34Encoder(w)


def test_resnet34_matches_torchvision():
    torch = pytest.importorskip("torch")
    tv = pytest.importorskip("torchvision")
    net = tv.models.resnet34(weights=None).eval()
    gen = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for name, buf in net.named_buffers():
            if name.endswith("running_mean"):
                buf.copy_(torch.randn(buf.shape, generator=gen) * 0.1)
            elif name.endswith("running_var"):
                buf.copy_(torch.rand(buf.shape, generator=gen) + 0.5)
        for name, p in net.named_parameters():
            if p.ndim == 1:
                p.copy_(torch.randn(p.shape, generator=gen) * 0.1 + (1.0 if name.endswith("weight") else 0.0))
    state = {k: v.numpy() for k, v in net.state_dict().items() if not k.endswith("num_batches_tracked")}
    ours = ResNet34Encoder(state)
    x = np.random.default_rng(1).standard_normal((1, 3, 64, 64)).astype(np.float32)
    with torch.no_grad():
        t = torch.from_numpy(x)
        t = net.maxpool(net.relu(net.bn1(net.conv1(t))))
        ref = []
        for layer in (net.layer1, net.layer2, net.layer3, net.layer4):
            t = layer(t)
            ref.append(t.numpy())
    for a, b in zip(ours(x), ref):
        np.testing.assert_allclose(a, b, rtol=1e-3, atol=1e-3 * np.abs(b).max())


def test_noise_statistics():
    feats = FeaturePyramid([np.zeros((1, 1, 1000, 1000), np.float32)])
    noisy = inject_noise(feats, 0.5, np.random.default_rng(0), mode="absolute")
    n = noisy.levels[0]
    assert noisy.role == "perturbed"
    assert abs(n.mean()) < 5 * 0.5 / 1000
    assert n.std() == pytest.approx(0.5, rel=5e-3)


def test_noise_relative_scale_and_zero_sigma():
    rng = np.random.default_rng(0)
    base = (rng.standard_normal((2, 4, 50, 50)) * 3.0).astype(np.float32)
    feats = FeaturePyramid([base])
    diff = inject_noise(feats, 0.1, np.random.default_rng(1)).levels[0] - base
    assert diff.std() == pytest.approx(0.1 * base.std(), rel=0.02)
    same = inject_noise(feats, 0.0, np.random.default_rng(1)).levels[0]
    assert np.array_equal(same, base) and same is not base
    with pytest.raises(ValueError):
        inject_noise(feats, -1.0, rng)


def test_decoder_runs_deep_to_shallow():
    dec = Decoder((4, 6, 8), (1, 2, 3), small_cfg(0))
    assert dec.stage_depths() == (3, 2, 1)
    out = dec(T.tensor(np.zeros((1, 8, 2, 2), np.float32)))
    assert out.shapes == [(1, 4, 8, 8), (1, 6, 4, 4), (1, 8, 2, 2)]


def _model(**kw):
    cfg = CssConfig(0, kernels=(3,), pyramid=PyramidSpec(levels=1, chain=1), d_state=2, **kw)
    return PyramidMamba(TinyEncoder(0), 32, (1, 1, 1), cfg, seed=0)


def test_gradient_reaches_every_decoder_parameter():
    model = _model()
    x = np.random.default_rng(0).standard_normal((2, 3, 32, 32)).astype(np.float32)
    enc, dec = model.forward(x, 0.1, np.random.default_rng(1))
    T.backward(multiscale_mse_loss(enc, dec))
    total = nonzero = 0
    for name, p in model.named_parameters():
        assert p.grad is not None, name
        total += p.grad.size
        nonzero += int((p.grad != 0).sum())
    assert nonzero / total >= 0.99


def test_noise_only_with_rng():
    model = _model()
    x = np.random.default_rng(0).standard_normal((1, 3, 32, 32)).astype(np.float32)
    with T.no_grad():
        _, clean = model.forward(x)
        _, clean2 = model.forward(x, 0.1, None)
        _, noisy = model.forward(x, 0.1, np.random.default_rng(0))
    assert model.noise_calls == 1
    assert np.array_equal(clean.arrays()[0], clean2.arrays()[0])
    assert not np.array_equal(clean.arrays()[0], noisy.arrays()[0])


def test_image_size_must_fit_pyramid():
    cfg = CssConfig(0, pyramid=PyramidSpec(levels=2, chain=1), d_state=2)
    with pytest.raises(ShapeError):
        PyramidMamba(TinyEncoder(0), 48, (1, 1, 1), cfg)


def test_lec_with_identity_weights_is_identity():
    block = LEC(3, 5)
    for conv in (block.pw_in, block.pw_out):
        conv.weight.data[:] = np.eye(3, dtype=np.float32)[:, :, None, None]
        conv.bias.data[:] = 0
    block.dw.weight.data[:] = 0
    block.dw.weight.data[:, 0, 2, 2] = 1
    block.dw.bias.data[:] = 0
    x = T.tensor(np.random.default_rng(0).standard_normal((2, 3, 6, 7)).astype(np.float32))
    np.testing.assert_array_equal(block(x).data, x.data)


@pytest.mark.parametrize("k", [5, 7])
def test_lec_default_width_shape(k):
    x = T.tensor(np.zeros((1, 64, 16, 16), np.float32))
    assert LEC(64, k)(x).shape == (1, 64, 16, 16)


@pytest.mark.parametrize("k", [5, 7])
def test_lec_receptive_field_against_direct_convolution(k):
    block = LEC(3, k, rng=np.random.default_rng(k), dtype=np.float64)
    x = np.zeros((1, 3, 13, 13))
    x[0, :, 6, 6] = [1.0, -2.0, 0.5]
    out = block(T.tensor(x)).data
    expect = x
    for conv in (block.pw_in, block.dw, block.pw_out):
        expect = oracles.conv2d_loops(expect, conv.weight.data, conv.bias.data, 1, conv.padding, conv.groups)
    np.testing.assert_allclose(out, expect, atol=1e-12)
    moved = np.abs(out - block(T.tensor(np.zeros_like(x))).data).sum(axis=1)[0] > 1e-12
    r = k // 2
    inside = np.zeros_like(moved)
    inside[6 - r : 7 + r, 6 - r : 7 + r] = True
    assert moved[6, 6] and not moved[~inside].any()


def test_css_defaults_follow_the_reference_setting():
    cfg = CssConfig(8)
    assert cfg.kernels == (5, 7) and cfg.pyramid.chain == 3 and cfg.pyramid.levels == 2
    block = CSS(cfg)
    assert len(block.pss) == 3 and [b.k for b in block.lecs] == [5, 7]
    assert block.fuse.weight.shape == (8, 24, 1, 1)


def test_mff_resnet_sized_levels_and_single_level():
    assert MFF((64, 128, 256, 512), (64, 32, 16, 8), 512).down_steps() == [3, 2, 1, 0]
    single = MFF((4,), (8,), 6)
    assert single.down_steps() == [0]
    x = np.random.default_rng(0).standard_normal((1, 4, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(single(FeaturePyramid([x])).data, single.proj(T.tensor(x)).data)


def test_resnet34_full_size_contract():
    feats = ResNet34Encoder(random_resnet34_weights(1))(np.zeros((1, 3, 256, 256), np.float32))
    assert [f.shape for f in feats] == [(1, 64, 64, 64), (1, 128, 32, 32), (1, 256, 16, 16), (1, 512, 8, 8)]


def test_encoder_stays_frozen_through_training_steps():
    from pyramid_mamba.tensor import AdamState, adam_step

    model = _model()
    before = {k: v.copy() for k, v in model.encoder.state_dict().items()}
    x = np.random.default_rng(0).standard_normal((2, 3, 32, 32)).astype(np.float32)
    feats_before = model.encode(x).levels
    params = model.parameters()
    opt = AdamState(learning_rate=1e-2)
    opt.init_for(params)
    for step in range(3):
        enc, dec = model.forward(x, 0.1, np.random.default_rng(step))
        loss = multiscale_mse_loss(enc, dec)
        T.zero_grads(params)
        loss.backward()
        adam_step(params, opt)
    after = model.encoder.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)
    assert all(np.array_equal(a, b) for a, b in zip(feats_before, model.encode(x).levels))
    assert not any(n.startswith("_encoder") or n.startswith("encoder") for n, _ in model.named_parameters())


def test_noise_is_reproducible_from_the_seed():
    feats = FeaturePyramid([np.random.default_rng(0).standard_normal((2, 3, 8, 8)).astype(np.float32)])
    a = inject_noise(feats, 0.1, np.random.default_rng([7, 1, 2, 0])).levels[0]
    b = inject_noise(feats, 0.1, np.random.default_rng([7, 1, 2, 0])).levels[0]
    c = inject_noise(feats, 0.1, np.random.default_rng([7, 1, 2, 1])).levels[0]
    assert np.array_equal(a, b) and not np.array_equal(a, c)
