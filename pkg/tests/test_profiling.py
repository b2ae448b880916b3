import json
from importlib import resources

import jsonschema
import numpy as np
import torch
import torch.nn as nn

from mariseg.blocks import CARM
from mariseg.data import SegSample
from mariseg.models import ModelConfig, build
from mariseg.profiling import (channel_weight_diversity, count_flops, count_params,
                               full_report, imu_channel_weight, rank_by_imu_weight,
                               replacement_sweep, time_blocks)

REF_CFG = ModelConfig(variant="wasr_ref", backbone="resnet101_dilated")


def tiny_model(variant="ewasr", seed=0, **kw):
    torch.manual_seed(seed)
    return build(ModelConfig(variant=variant, backbone="tiny", input_size=(64, 64), **kw))


def make_sample(image, stem="s"):
    h, w = image.shape[-2:]
    return SegSample(image=image, label=np.ones((h, w), dtype=np.uint8),
                     imu=np.zeros((h, w), dtype=np.uint8), stem=stem)


# ---------------------------------------------------------------------------
# parameter counting


def test_count_params_equals_bruteforce_enumeration():
    model = tiny_model("wasr_light")
    report = count_params(model)
    for name, module in model.named_blocks().items():
        brute = sum(int(np.prod(tuple(p.shape))) for _, p in module.named_parameters())
        assert report.block(name).params == brute
    total_brute = sum(int(np.prod(tuple(p.shape))) for p in model.parameters())
    assert report.totals["params"] == total_brute


def test_count_params_closed_form_conv():
    conv = nn.Conv2d(4, 2, 1, bias=True)
    report = count_params(conv, input_size=(8, 8))
    assert report.totals["params"] == 4 * 2 + 2 == 10


# ---------------------------------------------------------------------------
# flop counting


class _OneConv(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv = nn.Conv2d(4, 2, 1)

    def forward(self, x):
        return self.conv(x)


def test_count_flops_closed_form_conv1x1():
    m = _OneConv()
    report = count_flops(m, (8, 8), inputs=(torch.rand(1, 4, 8, 8),))
    assert report.totals["flops"] == 4 * 2 * 64 == 512


def test_count_flops_composite_equals_block_sum():
    model = tiny_model()
    report = count_flops(model, (64, 64))
    assert report.totals["flops"] == sum(b.flops for b in report.blocks)


def test_count_flops_meta_and_real_paths_agree():
    model = tiny_model("wasr_light", seed=3)
    via_meta = count_flops(model, (64, 64))
    image = torch.rand(1, 3, 64, 64)
    imu = torch.zeros(1, 1, 64, 64)
    via_real = count_flops(model, (64, 64), inputs=(image, imu))
    assert {b.name: b.flops for b in via_meta.blocks} == \
        {b.name: b.flops for b in via_real.blocks}


def test_reference_graph_block_params_within_ten_percent():
    targets = {"aspp1": 1.77e6, "carm1": 4.20e6, "ffm": 21.28e6,
               "carm2": 0.79e6, "aspp": 0.11e6, "ffm1": 13.91e6}
    with torch.device("meta"):
        model = build(REF_CFG)
    report = count_params(model)
    for name, target in targets.items():
        actual = report.block(name).params
        assert abs(actual - target) / target <= 0.10, (name, actual)


def test_reference_graph_flop_dominance_ordering():
    with torch.device("meta"):
        model = build(REF_CFG)
    report = count_flops(model, (384, 512), model_on_meta=model)
    f = {b.name: b.flops for b in report.blocks}
    assert f["ffm1"] > f["ffm"] > f["aspp1"] > f["carm2"] > f["aspp"] > f["carm1"]


def test_encoder_reference_figures():
    from mariseg.backbone import TapEncoder
    with torch.device("meta"):
        enc = TapEncoder("resnet18")
    params = count_params(enc, (384, 512)).totals["params"]
    flops = count_flops(enc, (384, 512)).totals["flops"]
    assert abs(params - 11.7e6) / 11.7e6 <= 0.02
    assert abs(flops - 7.2e9) / 7.2e9 <= 0.10


def test_replacement_sweep_strictly_reduces_flops():
    sweep = replacement_sweep(REF_CFG)
    assert len(sweep["replacements"]) == 6
    for row in sweep["replacements"]:
        assert row["flops_delta"] < 0, row


def test_report_passes_shipped_schema():
    model = tiny_model()
    report = full_report(model, (64, 64), repeats=1)
    payload = report.to_dict()
    schema = json.loads(resources.files("mariseg.schemas")
                        .joinpath("cost_report.schema.json").read_text())
    jsonschema.validate(payload, schema)
    text = report.to_table()
    assert "encoder" in text and "total" in text


# ---------------------------------------------------------------------------
# timing


def test_time_blocks_single_repeat_structure():
    model = tiny_model("wasr_light")
    image = torch.rand(1, 3, 64, 64)
    imu = torch.zeros(1, 1, 64, 64)
    report = time_blocks(model, image, imu, repeats=1, warmup=0)
    for block in report.blocks:
        assert block.time_total_ms >= 0.0
        assert block.time_max_op_ms >= 0.0
        assert block.time_max_op_ms <= block.time_total_ms + 1e-6
        assert block.time_jitter_ms == 0.0
    assert report.environment["repeats"] == 1
    assert report.environment["exclusive_host"] is False


def test_fusion_blocks_dominate_reference_wall_time():
    # reduced resolution keeps this quick; the fused-conv blocks out-cost the
    # rest by an order of magnitude, so wall-clock ordering is robust
    torch.manual_seed(0)
    model = build(ModelConfig(variant="wasr_ref", backbone="resnet101_dilated",
                              input_size=(64, 64)))
    image = torch.rand(1, 3, 64, 64)
    imu = torch.zeros(1, 1, 64, 64)
    report = time_blocks(model, image, imu, repeats=2, warmup=1)
    times = {b.name: b.time_total_ms for b in report.blocks
             if b.name not in ("encoder", "head")}
    slowest_two = sorted(times, key=times.get, reverse=True)[:2]
    assert set(slowest_two) == {"ffm", "ffm1"}, times


# ---------------------------------------------------------------------------
# gate statistics


class _GateProbe(nn.Module):
    """Minimal two-argument model exposing one channel gate over the image."""

    def __init__(self):
        super().__init__()
        self.carm = CARM(3)

    def named_blocks(self):
        return {"carm": self.carm}

    def forward(self, image, imu):
        return self.carm(image)


def test_diversity_zero_for_identical_images():
    model = tiny_model("wasr_light")
    image = np.random.rand(3, 64, 64).astype(np.float32)
    samples = [make_sample(image, f"s{i}") for i in range(3)]
    stats = channel_weight_diversity(model, samples, bins=10)
    assert stats, "expected at least one channel gate"
    for gate in stats.values():
        assert np.allclose(gate["per_channel_std"], 0.0)


def test_diversity_matches_two_point_oracle():
    torch.manual_seed(4)
    model = _GateProbe().eval()
    x1 = np.full((3, 4, 4), 0.2, dtype=np.float32)
    x2 = np.full((3, 4, 4), 0.8, dtype=np.float32)
    stats = channel_weight_diversity(model, [make_sample(x1), make_sample(x2)])

    w = model.carm.gate.weight.detach().numpy().reshape(3, 3)
    b = model.carm.gate.bias.detach().numpy()
    gates = []
    for x in (x1, x2):
        z = w @ x.mean(axis=(1, 2)) + b
        gates.append(1.0 / (1.0 + np.exp(-z)))
    expected = np.abs(gates[0] - gates[1]) / 2.0  # population std of two points
    assert np.allclose(stats["carm"]["per_channel_std"], expected, atol=1e-6)


def test_diversity_bounded_by_half(synth_samples):
    model = tiny_model("wasr_light", seed=9)
    stats = channel_weight_diversity(model, synth_samples[:4])
    for gate in stats.values():
        stds = np.asarray(gate["per_channel_std"])
        assert (stds >= 0.0).all() and (stds <= 0.5).all()
        assert sum(gate["hist_counts"]) == gate["channels"]


def test_imu_weight_in_open_interval(synth_samples):
    model = tiny_model("wasr_light", seed=1)
    weights = imu_channel_weight(model, synth_samples[0])
    assert set(weights) == {"carm1"}
    assert 0.0 < weights["carm1"] < 1.0


def test_imu_weight_zeroed_gate_is_exactly_half(synth_samples):
    model = tiny_model("wasr_light", seed=2)
    with torch.no_grad():
        model.carm1.gate.weight.zero_()
        model.carm1.gate.bias.zero_()
    weights = imu_channel_weight(model, synth_samples[0])
    assert weights["carm1"] == 0.5


def test_imu_weight_empty_without_imu_gates(synth_samples):
    model = tiny_model("ewasr", seed=3)
    assert imu_channel_weight(model, synth_samples[0]) == {}


def test_ranking_is_order_independent_permutation(synth_samples):
    model = tiny_model("wasr_light", seed=4)
    samples = synth_samples[:6]
    forward = rank_by_imu_weight(model, samples)
    backward = rank_by_imu_weight(model, list(reversed(samples)))
    assert [r["stem"] for r in forward] == [r["stem"] for r in backward]
    assert sorted(r["stem"] for r in forward) == sorted(s.stem for s in samples)
