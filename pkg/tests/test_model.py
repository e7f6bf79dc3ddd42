import numpy as np
import pytest

from msmunet.model import (
    AttentionGate,
    DBMSMUNet,
    DilatedReparamConv,
    MSMMStage,
    ModelConfig,
    UNetDecoder,
    apply_merged_drb,
    check_input_size,
    dilate_kernel,
    expected_stage_shape,
    logits_to_prob,
    merge_drb,
)
from msmunet.tensor import Tensor, no_grad
from msmunet.verify import ablation_configs

TINY = ModelConfig(base_width=8, state_size=4, mamba_layers_per_branch=1)


@pytest.fixture(scope="module")
def desk_outputs():
    model = DBMSMUNet(ModelConfig(), seed=0)
    image = np.random.default_rng(0).random((1, 1, 64, 64))
    with no_grad():
        return model, model.encode(image), model(image)


def test_desk_stage_shapes(desk_outputs):
    _, feats, _ = desk_outputs
    got = [tuple(f.tensor.shape[1:]) for f in feats]
    assert got == [(16, 16, 16), (32, 16, 16), (64, 8, 8), (128, 4, 4), (256, 2, 2)]


def test_desk_output_shapes(desk_outputs):
    _, _, out = desk_outputs
    assert out.area_logits.shape == (1, 1, 64, 64)
    assert out.edge_prob.shape == (1, 1, 64, 64)
    assert [a.shape[-1] for a in out.aux_area] == [16, 8, 4]
    assert [a.shape[-1] for a in out.aux_edge] == [16, 8, 4]
    for p in [out.edge_prob] + out.aux_edge:
        assert np.all((p.data > 0) & (p.data < 1))


def test_paper_scale_shape_law_224():
    cfg = ModelConfig.paper_scale()
    model = DBMSMUNet(cfg, seed=0)
    with no_grad():
        feats = model.encode(np.zeros((1, 1, 224, 224)))
    assert [tuple(f.tensor.shape[1:]) for f in feats[1:]] == [
        (64, 56, 56), (128, 28, 28), (256, 14, 14), (512, 7, 7)]


@pytest.mark.parametrize("level,shape", [(0, (32, 56, 56)), (1, (64, 56, 56)), (4, (512, 7, 7))])
def test_expected_stage_shape(level, shape):
    assert expected_stage_shape(ModelConfig.paper_scale(), level, 224, 224) == shape


@pytest.mark.parametrize("size", [60, 48, 0])
def test_input_size_rejected(size):
    with pytest.raises(ValueError, match="multiples of 32"):
        check_input_size(size, 64)


def test_wrong_channel_count_rejected():
    with pytest.raises(ValueError, match="B,1,H,W"):
        DBMSMUNet(TINY).encode(np.zeros((1, 3, 64, 64)))


def test_fused_width_is_eight_base_widths():
    model = DBMSMUNet(TINY)
    assert model.decoder.out_head.weight.shape == (1, 8 * TINY.base_width, 1, 1)


def test_zero_init_gate_halves_input(rng):
    g = AttentionGate(rng, 4, zero_init=True)
    x = rng.normal(size=(1, 4, 3, 3))
    np.testing.assert_allclose(g(Tensor(x)).data, 0.5 * x, rtol=1e-15)


@pytest.mark.parametrize("tap,rf", [(0, 1), (1, 2), (2, 3)])
def test_deformable_tap_receptive_field(rng, tap, rf):
    stage = MSMMStage(rng, 8, 8, downsample=False, config=TINY)
    x = rng.normal(size=(1, 8, 11, 11))
    masked = np.zeros_like(x)
    c = 5
    masked[..., c - rf : c + rf + 1, c - rf : c + rf + 1] = x[..., c - rf : c + rf + 1, c - rf : c + rf + 1]
    # the 1x1 reduce keeps locality, so compare after it
    with no_grad():
        full = stage.taps(Tensor(x))[tap].data[..., c, c]
        local = stage.taps(Tensor(masked))[tap].data[..., c, c]
    np.testing.assert_allclose(full, local, atol=1e-12)


def test_single_scale_stage_keeps_shape(rng):
    cfg = ModelConfig(base_width=8, state_size=4, mamba_layers_per_branch=1, multiscale_mamba=False)
    stage = MSMMStage(rng, 8, 16, downsample=True, config=cfg)
    with no_grad():
        assert stage(Tensor(rng.normal(size=(1, 8, 8, 8)))).shape == (1, 16, 4, 4)
    assert len(stage.branches) == 1


def test_forward_is_deterministic():
    image = np.random.default_rng(3).random((1, 1, 32, 32))
    outs = []
    for _ in range(2):
        with no_grad():
            outs.append(DBMSMUNet(TINY, seed=5)(image).area_logits.data)
    np.testing.assert_array_equal(*outs)


def test_ablation_switches_drop_modules():
    image = np.random.default_rng(0).random((1, 1, 32, 32))
    for cfg in ablation_configs(TINY):
        model = DBMSMUNet(cfg)
        names = [n for n, _ in model.named_parameters()]
        assert any(n.startswith("eep.") for n in names) == cfg.use_eep
        assert isinstance(model.decoder, UNetDecoder) == (not cfg.use_mld)
        with no_grad():
            out = model(image)
        assert (out.edge_prob is None) == (not cfg.use_eep)
        assert len(out.aux_area) == (3 if cfg.use_ads else 0)
        assert len(out.aux_edge) == (3 if cfg.use_ads and cfg.use_eep else 0)


def test_parameter_count_seed_invariant_and_grouped():
    a, b = DBMSMUNet(TINY, seed=0), DBMSMUNet(TINY, seed=9)
    assert a.parameter_groups() == b.parameter_groups()
    groups = a.parameter_groups()
    assert set(groups) == {"stem", "stage1", "stage2", "stage3", "stage4", "eep", "mld", "heads"}
    assert sum(groups.values()) == a.num_parameters()


def test_paper_scale_parameter_band():
    total = DBMSMUNet(ModelConfig.paper_scale()).num_parameters()
    assert 33e6 <= total <= 55e6


def test_dilate_kernel_interleaves_zeros():
    k = np.arange(1.0, 5.0).reshape(2, 2)
    np.testing.assert_array_equal(dilate_kernel(k, 2), [[1, 0, 2], [0, 0, 0], [3, 0, 4]])


@pytest.mark.parametrize("k", [5, 7, 9])
def test_merged_drb_matches_branches(rng, k):
    d = DilatedReparamConv(rng, 3, k)
    for s, b in zip(d.scales, d.shifts):
        s.assign(rng.normal(1.0, 0.3, s.shape))
        b.assign(rng.normal(0.0, 0.3, b.shape))
    x = Tensor(rng.normal(size=(1, 3, 13, 13)))
    with no_grad():
        diff = np.abs(d(x).data - apply_merged_drb(x, *merge_drb(d)).data).max()
    assert diff <= 1e-6


def test_drb_branch_validation(rng):
    with pytest.raises(ValueError, match="odd"):
        DilatedReparamConv(rng, 2, 6)
    with pytest.raises(ValueError, match="exceeds"):
        DilatedReparamConv(rng, 2, 5, branches=((3, 3),))


@pytest.mark.parametrize("kw,msg", [
    ({"ads_weights": (0.5, 0.3, 0.1)}, "summing to 1"),
    ({"stages": 3}, "4 stages"),
    ({"base_width": 7}, "even"),
    ({"num_classes": 0}, "num_classes"),
])
def test_config_validation(kw, msg):
    with pytest.raises(ValueError, match=msg):
        ModelConfig(**kw)


def test_multiclass_probability_uses_foreground_channel():
    logits = Tensor(np.array([0.0, np.log(3.0)]).reshape(1, 2, 1, 1))
    assert logits_to_prob(logits).data.item() == pytest.approx(0.75)
    two = DBMSMUNet(ModelConfig(base_width=8, state_size=4, mamba_layers_per_branch=1, num_classes=2))
    with no_grad():
        assert two(np.zeros((1, 1, 32, 32))).area_prob().shape == (1, 1, 32, 32)
