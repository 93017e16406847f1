import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from diffinspect import model as M
from diffinspect.diffusion import BoxState
from diffinspect.errors import ConfigError

torch.set_num_threads(1)


def tiny_model(**kw):
    torch.manual_seed(0)
    defaults = dict(channels=32, head_dim=64, c_mask=4, mask_layers=2,
                    mask_stride=8, pool_size=3)
    defaults.update(kw)
    return M.DetectionModel(**defaults)


# ---------------------------------------------------------------------------
# kernel bookkeeping

def test_kernel_param_count_default():
    spec = M.default_layer_spec(8, 3)
    assert spec == [(10, 8), (8, 8), (8, 1)]
    assert M.kernel_param_count(spec) == 169


@pytest.mark.parametrize("c_mask,n_layers", [
    (8, 3), (8, 1), (4, 2), (16, 4), (2, 1), (1, 3), (12, 2), (6, 5),
    (3, 3), (8, 2),
])
def test_kernel_param_count_arithmetic(c_mask, n_layers):
    spec = M.default_layer_spec(c_mask, n_layers)
    # independent count: each 1x1 layer holds in*out weights plus out biases
    want = 0
    for c_in, c_out in spec:
        want += c_in * c_out + c_out
    assert M.kernel_param_count(spec) == want
    assert spec[0][0] == c_mask + 2
    assert spec[-1][1] == 1


def test_kernel_param_count_rejects_bad_chains():
    with pytest.raises(ConfigError):
        M.kernel_param_count([])
    with pytest.raises(ConfigError):
        M.kernel_param_count([(10, 8), (4, 1)])  # 8 -> 4 mismatch
    with pytest.raises(ConfigError):
        M.kernel_param_count([(10, 8), (8, 2)])  # final channel not 1
    with pytest.raises(ConfigError):
        M.default_layer_spec(8, 0)


@settings(max_examples=25, deadline=None)
@given(c_mask=st.integers(1, 16), n_layers=st.integers(1, 5),
       seed=st.integers(0, 999))
def test_flatten_unflatten_round_trip(c_mask, n_layers, seed):
    spec = M.default_layer_spec(c_mask, n_layers)
    g = torch.Generator().manual_seed(seed)
    theta = torch.randn(M.kernel_param_count(spec), generator=g)
    params = M.unflatten_kernel(theta, spec)
    assert len(params) == len(spec)
    for (w, b), (c_in, c_out) in zip(params, spec):
        assert w.shape == (c_out, c_in) and b.shape == (c_out,)
    assert torch.equal(M.flatten_kernel(params), theta)


def test_unflatten_rejects_wrong_length():
    spec = M.default_layer_spec(4, 2)
    with pytest.raises(ValueError):
        M.unflatten_kernel(torch.zeros(M.kernel_param_count(spec) + 1), spec)
    with pytest.raises(ValueError):
        M.MaskKernelVector(np.zeros(3), spec)


def test_sinusoidal_embedding():
    t = torch.tensor([0.0, 1.0, 500.0, 1000.0])
    emb = M.sinusoidal_embedding(t, 128)
    assert emb.shape == (4, 128)
    assert emb.abs().max() <= 1.0
    assert not torch.allclose(emb[1], emb[2])
    # t=0: all sines 0, all cosines 1
    assert torch.allclose(emb[0, :64], torch.zeros(64))
    assert torch.allclose(emb[0, 64:], torch.ones(64))


# ---------------------------------------------------------------------------
# backbone and pyramid

def test_backbone_registry():
    for name in ("tiny-cnn", "resnet50", "resnet101", "swin"):
        assert name in M.BACKBONE_REGISTRY
    with pytest.raises(ConfigError, match="vgg"):
        M.build_backbone("vgg")
    # pretrained weights are an explicit input, never downloaded
    with pytest.raises(ConfigError):
        M.build_backbone("resnet50")
    with pytest.raises(ConfigError):
        M.build_backbone("swin", weights="/nonexistent/weights.bin")


def test_tiny_backbone_shapes():
    torch.manual_seed(0)
    net = M.build_backbone("tiny-cnn")
    assert net.strides == (4, 8, 16, 32)
    x = torch.zeros(2, 1, 480, 480)
    maps = net(x)
    assert [tuple(m.shape[-2:]) for m in maps] == [
        (120, 120), (60, 60), (30, 30), (15, 15)
    ]
    assert [m.shape[1] for m in maps] == list(net.channels)


def test_tiny_backbone_param_count():
    torch.manual_seed(0)
    net = M.build_backbone("tiny-cnn")
    total = sum(p.numel() for p in net.parameters())
    assert total == 402_512


def test_feature_maps_validate():
    good = M.FeatureMaps(
        levels=[(8, torch.zeros(1, 4, 8, 8)), (16, torch.zeros(1, 4, 4, 4))],
        image_size=(64, 64),
    )
    good.validate()
    with pytest.raises(ValueError, match="strides"):
        M.FeatureMaps(
            levels=[(16, torch.zeros(1, 4, 4, 4)), (8, torch.zeros(1, 4, 8, 8))],
            image_size=(64, 64),
        ).validate()
    with pytest.raises(ValueError, match="channel"):
        M.FeatureMaps(
            levels=[(8, torch.zeros(1, 4, 8, 8)), (16, torch.zeros(1, 2, 4, 4))],
            image_size=(64, 64),
        ).validate()
    with pytest.raises(ValueError, match="spatial"):
        M.FeatureMaps(
            levels=[(8, torch.zeros(1, 4, 9, 8))], image_size=(64, 64)
        ).validate()


def test_mask_fusion_additive_over_level_inputs():
    torch.manual_seed(1)
    fusion = M.MaskFusion(in_channels=4, c_mask=2, n_levels=2, stride=8)
    z = torch.zeros(1, 4, 8, 8)
    a = torch.randn(1, 4, 8, 8)
    b = torch.randn(1, 4, 8, 8)

    def fuse(m0, m1):
        feats = M.FeatureMaps(levels=[(8, m0), (8, m1)], image_size=(64, 64))
        return fusion(feats).map

    # linear: biases cancel in the second difference
    lhs = fuse(a + b, z)
    rhs = fuse(a, z) + fuse(b, z) - fuse(z, z)
    torch.testing.assert_close(lhs, rhs, atol=1e-5, rtol=1e-5)
    lhs2 = fuse(z, a + b)
    rhs2 = fuse(z, a) + fuse(z, b) - fuse(z, z)
    torch.testing.assert_close(lhs2, rhs2, atol=1e-5, rtol=1e-5)


def test_mask_fusion_resamples_to_fusion_stride():
    torch.manual_seed(2)
    fusion = M.MaskFusion(in_channels=3, c_mask=2, n_levels=2, stride=8)
    feats = M.FeatureMaps(
        levels=[(8, torch.randn(1, 3, 16, 16)), (16, torch.randn(1, 3, 8, 8))],
        image_size=(128, 128),
    )
    fused = fusion(feats)
    assert fused.map.shape == (1, 2, 16, 16)
    assert fused.stride == 8 and fused.image_size == (128, 128)


# ---------------------------------------------------------------------------
# box geometry

def test_unit_to_pixel_floors_degenerate():
    unit = torch.tensor([[0.5, 0.5, 0.0, 0.5]])
    out = M.unit_to_pixel_xyxy(unit, (100, 100))
    x0, y0, x1, y1 = out[0].tolist()
    assert x1 - x0 == pytest.approx(1.0)
    assert y1 - y0 == pytest.approx(50.0)


def test_signal_to_unit_clamps():
    sig = torch.tensor([[5.0, -5.0, 0.0, 2.0]])
    unit = M.signal_to_unit_boxes(sig, 2.0)
    assert unit[0].tolist() == [1.0, 0.0, 0.5, 1.0]


# ---------------------------------------------------------------------------
# mask decoding closed forms

def _identity_fused(mapv):
    # stride 1 with image size equal to the map keeps upsampling the identity
    h, w = mapv.shape[-2:]
    return M.FusedFeatureMap(map=mapv, stride=1, image_size=(w, h))


def test_decode_mask_passthrough_kernel():
    # weight [1, 0, 0] bias 0 on (1 fused + 2 coord) channels copies the
    # fused channel into the logits, so the mask is its sign pattern
    vals = torch.linspace(-3, 3, 64).reshape(1, 1, 8, 8)
    fused = _identity_fused(vals)
    theta = np.array([1.0, 0.0, 0.0, 0.0])
    out = M.decode_mask(fused, theta, [(3, 1)], (0, 0, 8, 8), (8, 8))
    want = (vals[0, 0] >= 0).numpy().astype(np.uint8)
    np.testing.assert_array_equal(out, want)


def test_decode_mask_coordinate_kernel():
    # weight selects rel_x only: mask is exactly the right half plane of the
    # box (pixel centers at or right of the box center)
    fused = _identity_fused(torch.zeros(1, 1, 8, 8))
    theta = np.array([0.0, 1.0, 0.0, 0.0])
    out = M.decode_mask(fused, theta, [(3, 1)], (0, 0, 8, 8), (8, 8))
    want = np.zeros((8, 8), np.uint8)
    want[:, 4:] = 1
    np.testing.assert_array_equal(out, want)


def test_decode_mask_bias_saturation():
    fused = _identity_fused(torch.randn(1, 1, 8, 8))
    ones = M.decode_mask(fused, np.array([0.0, 0, 0, 10.0]), [(3, 1)],
                         (0, 0, 8, 8), (8, 8))
    zeros = M.decode_mask(fused, np.array([0.0, 0, 0, -10.0]), [(3, 1)],
                          (0, 0, 8, 8), (8, 8))
    assert ones.all() and not zeros.any()


def test_decode_mask_accepts_kernel_vector():
    torch.manual_seed(3)
    fused = _identity_fused(torch.randn(1, 2, 8, 8))
    spec = M.default_layer_spec(2, 2)
    theta = np.random.default_rng(0).standard_normal(M.kernel_param_count(spec))
    flat = M.decode_mask(fused, theta, spec, (1, 1, 5, 5), (8, 8))
    wrapped = M.decode_mask(fused, M.MaskKernelVector(theta, spec), None,
                            (1, 1, 5, 5), (8, 8))
    np.testing.assert_array_equal(flat, wrapped)


def test_decode_mask_upsamples_to_image():
    fused = M.FusedFeatureMap(map=torch.randn(1, 1, 4, 4), stride=8,
                              image_size=(32, 32))
    out = M.decode_mask(fused, np.array([1.0, 0, 0, 0]), [(3, 1)],
                        (4, 4, 16, 16), (32, 32))
    assert out.shape == (32, 32) and out.dtype == np.uint8


def test_mask_logit_map_gradients():
    # finite-difference agreement on the full chain including ReLU and the
    # coordinate channels
    torch.manual_seed(4)
    spec = [(4, 2), (2, 1)]
    fused = torch.randn(2, 8, 8, dtype=torch.float64)
    theta0 = torch.randn(M.kernel_param_count(spec), dtype=torch.float64,
                         requires_grad=True)

    def f(theta):
        return M.mask_logit_map(fused, 1, theta, spec, (1, 2, 6, 7))

    assert torch.autograd.gradcheck(f, (theta0,), eps=1e-6, atol=1e-4)


def test_zero_theta_gives_flat_probability():
    spec = M.default_layer_spec(2, 2)
    fused = torch.randn(2, 6, 6)
    prob = M.mask_prob_map(fused, 8, torch.zeros(M.kernel_param_count(spec)),
                           spec, (0, 0, 48, 48))
    torch.testing.assert_close(prob, torch.full((6, 6), 0.5))


# ---------------------------------------------------------------------------
# detection head

def test_head_forward_shapes_and_determinism():
    model = tiny_model()
    images = model.images_to_tensor([np.zeros((64, 64), np.uint8)] * 2)
    feats = model.backbone_forward(images)
    boxes = np.random.default_rng(0).standard_normal((2, 12, 4))
    out1 = model.head_forward(feats, boxes, 1000)
    out2 = model.head_forward(feats, boxes, 1000)
    assert out1.class_logits.shape == (2, 12, 5)
    assert out1.box_pred.shape == (2, 12, 4)
    kp = M.kernel_param_count(model.layer_spec)
    assert out1.mask_kernels.shape == (2, 12, kp)
    assert out1.scores.shape == (2, 12)
    assert out1.scale == model.scale
    torch.testing.assert_close(out1.class_logits, out2.class_logits)
    torch.testing.assert_close(out1.box_pred, out2.box_pred)
    assert out1.box_pred.abs().max() <= model.scale


def test_head_timestep_changes_output():
    model = tiny_model()
    images = model.images_to_tensor([np.zeros((64, 64), np.uint8)])
    feats = model.backbone_forward(images)
    boxes = np.random.default_rng(1).standard_normal((1, 6, 4))
    a = model.head_forward(feats, boxes, 1)
    b = model.head_forward(feats, boxes, 1000)
    assert not torch.allclose(a.class_logits, b.class_logits)


def test_head_duplicate_rows_get_identical_outputs():
    model = tiny_model()
    rng = np.random.default_rng(2)
    pix = rng.integers(0, 255, (64, 64), dtype=np.uint8)
    feats = model.backbone_forward(model.images_to_tensor([pix]))
    row = rng.standard_normal(4)
    boxes = np.stack([row, row, rng.standard_normal(4)])[None]
    out = model.head_forward(feats, boxes, 500)
    torch.testing.assert_close(out.class_logits[0, 0], out.class_logits[0, 1])
    torch.testing.assert_close(out.box_pred[0, 0], out.box_pred[0, 1])


def test_head_empty_box_set():
    model = tiny_model()
    feats = model.backbone_forward(
        model.images_to_tensor([np.zeros((64, 64), np.uint8)])
    )
    out = model.head_forward(feats, np.zeros((1, 0, 4)), 1000)
    assert out.class_logits.shape == (1, 0, 5)
    assert out.box_pred.shape == (1, 0, 4)
    assert out.scores.shape == (1, 0)


def test_head_accepts_box_state():
    model = tiny_model()
    feats = model.backbone_forward(
        model.images_to_tensor([np.zeros((64, 64), np.uint8)])
    )
    state = BoxState(np.random.default_rng(3).standard_normal((5, 4)), 700)
    out_state = model.head_forward(feats, state, None)
    out_raw = model.head_forward(feats, state.boxes[None], 700)
    torch.testing.assert_close(out_state.class_logits, out_raw.class_logits)


def test_initial_scores_near_prior():
    model = tiny_model()
    feats = model.backbone_forward(
        model.images_to_tensor([np.zeros((64, 64), np.uint8)])
    )
    out = model.head_forward(
        feats, np.random.default_rng(4).standard_normal((1, 20, 4)), 1000
    )
    # freshly initialized classifier sits near the 0.01 prior probability
    assert out.scores.max().item() < 0.2


def test_level_assignment_by_area():
    head = M.DetectionHead(channels=4, strides=(4, 8, 16, 32), head_dim=8,
                           kernel_params=9, pool_size=7)
    boxes = torch.tensor([[
        [0.0, 0.0, 28.0, 28.0],      # sqrt(area)/7 = 4
        [0.0, 0.0, 56.0, 56.0],      # 8
        [0.0, 0.0, 112.0, 112.0],    # 16
        [0.0, 0.0, 224.0, 224.0],    # 32
    ]])
    levels = head._assign_levels(boxes)
    assert levels[0].tolist() == [0, 1, 2, 3]


def test_images_to_tensor_normalization():
    model = tiny_model()
    batch = model.images_to_tensor([np.full((8, 8), 191, np.uint8),
                                    np.zeros((8, 8), np.uint8)])
    assert batch.shape == (2, 1, 8, 8)
    # (191/255 - 0.5) / 0.25
    assert batch[0, 0, 0, 0].item() == pytest.approx(0.9960784, rel=1e-5)
    assert batch[1, 0, 0, 0].item() == pytest.approx(-2.0)


def test_model_build_reproducible():
    a = tiny_model()
    b = tiny_model()
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


def test_model_rejects_foreign_mask_stride():
    with pytest.raises(ConfigError, match="stride"):
        tiny_model(mask_stride=5)
