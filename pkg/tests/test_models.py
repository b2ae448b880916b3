import pytest
import torch

from mariseg.blocks import MetaFormerBlock
from mariseg.errors import ConfigError
from mariseg.models import (EWaSRNet, ModelConfig, REPLACEABLE_BLOCKS, WaSRNet,
                            build, summary)


def tiny_cfg(**kw):
    kw.setdefault("variant", "ewasr")
    kw.setdefault("backbone", "tiny")
    kw.setdefault("input_size", (64, 64))
    return ModelConfig(**kw)


def tiny_inputs(batch=1, size=64, seed=0):
    g = torch.Generator().manual_seed(seed)
    image = torch.rand(batch, 3, size, size, generator=g)
    imu = (torch.rand(batch, size, size, generator=g) > 0.5).float()
    return image, imu


def nparams(m):
    return sum(p.numel() for p in m.parameters())


def test_default_ewasr_output_shape():
    torch.manual_seed(0)
    model = build(ModelConfig()).eval()
    image = torch.rand(1, 3, 384, 512)
    imu = torch.zeros(1, 384, 512)
    with torch.no_grad():
        probs, sep = model(image, imu)
    assert probs.shape == (1, 3, 384, 512)
    assert sep.shape == (1, 256, 24, 32)  # stride-16 backbone tap


def test_lsse_input_channels_default_and_reduced():
    with torch.device("meta"):
        assert build(ModelConfig()).lsse_in_channels == 960
        assert build(ModelConfig(channel_reduction=True)).lsse_in_channels == 480


def test_probabilities_sum_to_one_and_deterministic():
    torch.manual_seed(1)
    model = build(tiny_cfg()).eval()
    image, imu = tiny_inputs()
    with torch.no_grad():
        p1, _ = model(image, imu)
        p2, _ = model(image, imu)
    assert float((p1.sum(dim=1) - 1).abs().max()) <= 1e-5
    assert torch.equal(p1, p2)


def test_all_blocks_replaced_still_builds_and_runs():
    cfg = tiny_cfg(variant="wasr_light",
                   block_replacements={b: "conv1x1" for b in REPLACEABLE_BLOCKS})
    torch.manual_seed(2)
    model = build(cfg).eval()
    image, imu = tiny_inputs()
    with torch.no_grad():
        probs, _ = model(image, imu)
    assert probs.shape == (1, 3, 64, 64)


def test_lsse_zeroed_projections_is_identity_on_fused_features():
    torch.manual_seed(3)
    model = build(tiny_cfg(lsse_layout=("crm",))).eval()
    block = model.lsse[0]
    with torch.no_grad():
        for p in block.mixer_proj.parameters():
            p.zero_()
        for p in block.mlp[2].parameters():
            p.zero_()
    fused = torch.randn(1, model.lsse_in_channels, 2, 2)
    with torch.no_grad():
        assert float((model.lsse(fused) - fused).abs().max()) <= 1e-6


def test_recomposition_of_module_oracles_matches_forward():
    torch.manual_seed(4)
    model = build(tiny_cfg()).eval()
    image, imu = tiny_inputs(seed=5)
    with torch.no_grad():
        probs, sep = model(image, imu)

        from mariseg.backbone import multi_scale_concat
        taps = model.encoder(image)
        semantic = model.lsse(multi_scale_concat(taps))
        d16 = model.inject_16(taps.features[2], semantic)
        local8 = model.skip_refine(taps.features[1])
        d8 = model.inject_8(local8, d16)
        expected = model.head(d8, imu.unsqueeze(1), image.shape[-2:])
    assert torch.equal(probs, expected)
    assert torch.equal(sep, taps.features[2])


def test_long_skip_toggle_strictly_reduces_params_same_shapes():
    torch.manual_seed(6)
    with_skip = build(tiny_cfg(long_skip_srm=True)).eval()
    torch.manual_seed(6)
    without = build(tiny_cfg(long_skip_srm=False)).eval()
    assert nparams(without) < nparams(with_skip)
    image, imu = tiny_inputs()
    with torch.no_grad():
        pa, sa = with_skip(image, imu)
        pb, sb = without(image, imu)
    assert pa.shape == pb.shape and sa.shape == sb.shape


def test_srm_ablation_layout_builds():
    model = build(tiny_cfg(lsse_layout=("crm", "crm", "crm")))
    mixers = [type(b.mixer).__name__ for b in model.lsse]
    assert mixers == ["CARM", "CARM", "CARM"]


def test_wasr_light_uses_wasr_decoder_blocks():
    with torch.device("meta"):
        model = build(ModelConfig(variant="wasr_light", backbone="resnet18"))
    assert isinstance(model, WaSRNet)
    assert list(model.named_blocks()) == ["encoder", "aspp1", "carm1", "ffm",
                                          "carm2", "aspp", "ffm1", "head"]


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(variant="unet")
    with pytest.raises(ConfigError):
        ModelConfig(variant="ewasr", block_replacements={"ffm": "conv1x1"})
    with pytest.raises(ConfigError):
        ModelConfig(variant="wasr_light", block_replacements={"bogus": "conv1x1"})
    with pytest.raises(ConfigError):
        ModelConfig(variant="wasr_light", block_replacements={"ffm": "drop"})
    with pytest.raises(ConfigError):
        ModelConfig(lsse_layout=())
    with pytest.raises(ConfigError):
        ModelConfig(lsse_layout=("crm", "pool"))
    with pytest.raises(ConfigError):
        ModelConfig(input_size=(100, 64))


def test_config_round_trip_and_unknown_key():
    cfg = tiny_cfg(channel_reduction=True, lsse_layout=("crm", "srm"))
    clone = ModelConfig.from_dict(cfg.to_dict())
    assert clone == cfg
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"variant": "ewasr", "dropout": 0.1})


def test_summary_lists_blocks():
    with torch.device("meta"):
        model = build(tiny_cfg(variant="wasr_light"))
    text = summary(model)
    for name in ("encoder", "aspp1", "carm1", "ffm", "carm2", "aspp", "ffm1", "head"):
        assert name in text


def test_ewasr_is_default_variant_class():
    with torch.device("meta"):
        assert isinstance(build(ModelConfig()), EWaSRNet)


def test_lsse_default_layout_mixers():
    with torch.device("meta"):
        model = build(ModelConfig())
    kinds = [type(b.mixer).__name__ for b in model.lsse]
    assert kinds == ["CARM", "SARM", "SARM"]
    assert all(isinstance(b, MetaFormerBlock) for b in model.lsse)
