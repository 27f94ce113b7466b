import numpy as np
import pytest

from compnet.autograd import ShapeError, Tensor, backward
from compnet.gradcheck import grad_check
from compnet.losses import model_loss
from compnet.models import (
    VARIANTS,
    NetworkConfig,
    build_model,
    count_params,
    plain_unet_param_formula,
    probability_gate,
)


def tiny(variant, **kw):
    kw.setdefault("width_scale", 0.125)
    kw.setdefault("levels", 3)
    kw.setdefault("dense_layers", (2, 2, 3))
    kw.setdefault("growth_filters", 4)
    return NetworkConfig(variant, **kw)


def batch(n=2, size=16, seed=0):
    return np.random.default_rng(seed).random((n, 1, size, size)).astype(np.float32)


# ---------------------------------------------------------------- config

def test_config_validation():
    with pytest.raises(ValueError):
        NetworkConfig("resnet")
    with pytest.raises(ValueError):
        NetworkConfig("plain-unet", width_scale=0.1)  # 3.2 channels
    with pytest.raises(ValueError):
        NetworkConfig("plain-unet", width_scale=0.0625)  # 2 channels
    with pytest.raises(ValueError):
        NetworkConfig("plain-unet", levels=1)
    with pytest.raises(ValueError):
        NetworkConfig("optimal-compnet", levels=5, dense_layers=(4, 10))


def test_config_dict_round_trip_and_strict_keys():
    cfg = tiny("prob-compnet", gate_levels=(True, False))
    assert NetworkConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        NetworkConfig.from_dict({**cfg.to_dict(), "depth": 3})


# ------------------------------------------------------------ param counts

def test_full_scale_counts_within_ten_percent():
    opt = count_params(build_model(NetworkConfig("optimal-compnet")))
    plain = count_params(build_model(NetworkConfig("plain-compnet")))
    assert abs(opt - 15.3e6) <= 0.1 * 15.3e6
    assert abs(plain - 18e6) <= 0.1 * 18e6


def test_toy_plain_unet_matches_hand_count():
    # filters (4, 8): blocks 204 + 912, upconv 132, decoder block 456, head 5.
    model = build_model(NetworkConfig("plain-unet", width_scale=0.125, levels=2))
    assert count_params(model) == 1709
    assert plain_unet_param_formula([4, 8]) == 1709


@pytest.mark.parametrize("ws,levels", [(0.125, 3), (0.25, 4), (1.0, 5)])
def test_plain_unet_matches_closed_form(ws, levels):
    cfg = NetworkConfig("plain-unet", width_scale=ws, levels=levels)
    assert count_params(build_model(cfg)) == plain_unet_param_formula(cfg.filters())


def test_toy_plain_compnet_hand_count():
    # Three plain U-Net bodies: a segmentation U-Net, a complementary decoder+head,
    # and a reconstruction U-Net fed with seg+comp.
    cfg = NetworkConfig("plain-compnet", width_scale=0.125, levels=2)
    unet = plain_unet_param_formula([4, 8])
    encoder = 204 + 912
    assert count_params(build_model(cfg)) == 2 * unet + (unet - encoder)


@pytest.mark.parametrize("variant", VARIANTS)
def test_count_monotone_in_width(variant):
    small = count_params(build_model(tiny(variant, width_scale=0.125)))
    large = count_params(build_model(tiny(variant, width_scale=0.25)))
    assert large >= small


def test_bn_running_stats_not_counted():
    model = build_model(tiny("plain-unet"))
    assert count_params(model) == sum(p.size for p in model.parameters())
    assert len(model.buffers) > 0


def test_parameter_names_unique_and_stable():
    a, b = build_model(tiny("optimal-compnet")), build_model(tiny("optimal-compnet"))
    names = list(a.params)
    assert len(names) == len(set(names))
    assert names == list(b.params)
    for n in names:
        np.testing.assert_array_equal(a.params[n].data, b.params[n].data)


# ------------------------------------------------------------------ forward

@pytest.mark.parametrize("variant", VARIANTS)
def test_output_contract(variant):
    model = build_model(tiny(variant))
    out = model(batch(), mode="eval")
    assert out.seg_final.shape == (2, 1, 16, 16)
    maps = out.seg_outputs + out.comp_outputs + out.recon_outputs
    for m in maps:
        assert m.shape == (2, 1, 16, 16)
        assert 0.0 <= m.data.min() and m.data.max() <= 1.0
    if variant.endswith("unet"):
        assert out.comp_final is None and out.recon is None
    else:
        assert out.comp_final is not None
    if variant in ("plain-compnet", "optimal-compnet"):
        assert out.recon is not None and out.recon_input is not None
    if variant == "prob-compnet":
        assert out.recon is None


def test_optimal_compnet_has_six_outputs_per_branch():
    model = build_model(NetworkConfig("optimal-compnet", width_scale=0.125, levels=5, growth_filters=3,
                                      dense_layers=(2, 2, 2, 2, 2)))
    out = model(batch(1, 64), mode="eval")
    assert len(out.seg_outputs) == len(out.comp_outputs) == len(out.recon_outputs) == 6
    assert out.recon_input.shape == (1, 1, 64, 64)


@pytest.mark.parametrize("variant", VARIANTS)
def test_eval_mode_is_bit_deterministic(variant):
    model = build_model(tiny(variant))
    x = batch()
    a, b = model(x, mode="eval"), model(x, mode="eval")
    np.testing.assert_array_equal(a.seg_final.data, b.seg_final.data)
    if a.recon is not None:
        np.testing.assert_array_equal(a.recon.data, b.recon.data)


def test_input_validation():
    model = build_model(tiny("plain-unet"))
    with pytest.raises(ShapeError):
        model(np.zeros((1, 1, 18, 18), np.float32))  # not divisible by 4
    with pytest.raises(ShapeError):
        model(np.zeros((1, 2, 16, 16), np.float32))


@pytest.mark.parametrize("variant", ["plain-compnet", "optimal-compnet", "prob-compnet"])
def test_shared_encoder_couples_both_branches(variant):
    model = build_model(tiny(variant))
    x = batch()
    before = model(x, mode="eval")
    w = model.encoder.blocks[0].layers[0].conv.weight if variant == "optimal-compnet" \
        else model.encoder.blocks[0].layer1.conv.weight
    w.data[0, 0, 1, 1] += 0.5
    after = model(x, mode="eval")
    assert not np.array_equal(before.seg_final.data, after.seg_final.data)
    assert not np.array_equal(before.comp_final.data, after.comp_final.data)


def test_forward_backward_grads_finite():
    model = build_model(tiny("optimal-compnet"))
    x = batch()
    y = (x > 0.5).astype(np.float32)
    out = model(x, mode="train", rng=np.random.default_rng(0))
    backward(model_loss(out, y, x).total)
    for name, p in model.params.items():
        assert p.grad is not None, name
        assert np.all(np.isfinite(p.grad)), name


# -------------------------------------------------------- probability gate

def test_gate_saturation_and_identity():
    rng = np.random.default_rng(0)
    feat_self = Tensor(rng.standard_normal((1, 3, 4, 4)))
    feat_other = Tensor(rng.standard_normal((1, 5, 4, 4)))
    w = Tensor(np.zeros((1, 3, 1, 1)))
    ones = probability_gate(feat_self, feat_other, w, Tensor(np.array([1e3])))
    np.testing.assert_array_equal(ones.data, np.zeros((1, 5, 4, 4)))
    zeros = probability_gate(feat_self, feat_other, w, Tensor(np.array([-1e3])))
    np.testing.assert_array_equal(zeros.data, feat_other.data)


def test_gate_gradient_reaches_both_branches():
    rng = np.random.default_rng(2)
    inputs = [rng.standard_normal((1, 2, 3, 3)), rng.standard_normal((1, 4, 3, 3)),
              rng.standard_normal((1, 2, 1, 1)), rng.standard_normal(1)]
    assert grad_check(probability_gate, inputs) < 1e-4
    a, b = Tensor(inputs[0], requires_grad=True), Tensor(inputs[1], requires_grad=True)
    backward(probability_gate(a, b, Tensor(inputs[2]), Tensor(inputs[3])).sum())
    assert np.abs(a.grad).sum() > 0 and np.abs(b.grad).sum() > 0


def test_gate_rejects_spatial_mismatch():
    with pytest.raises(ShapeError):
        probability_gate(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 2, 2))),
                         Tensor(np.zeros((1, 2, 1, 1))), Tensor(np.zeros(1)))


def test_gate_levels_mask_disables_gates():
    model_all = build_model(tiny("prob-compnet"))
    model_none = build_model(tiny("prob-compnet", gate_levels=(False, False)))
    x = batch()
    a, b = model_all(x), model_none(x)
    assert not np.array_equal(a.seg_final.data, b.seg_final.data)
