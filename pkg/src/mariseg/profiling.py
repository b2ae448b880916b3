"""Block-level cost analysis: parameters, analytic FLOPs, wall time, gate statistics.

FLOP counting is analytic under a documented convention (stamped on every
report): one unit is one multiply, covering convolution/linear
multiply-accumulates plus the elementwise products of sigmoid gate scalings.
Pooling, normalization, activations, resizes, and additions are excluded.
Shapes are propagated with a meta-device forward pass, so no real compute or
memory is spent on large graphs.
"""

import copy
import dataclasses
import json
import platform
import statistics
import time
from collections import defaultdict
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn

from . import __version__
from .blocks import CARM, FFM, SARM, SIM
from .errors import ConfigError
from .models import REPLACEABLE_BLOCKS, build
from .train import batch_tensors

FLOP_CONVENTION = ("1 unit = 1 multiply: conv/linear MACs + elementwise products "
                   "of sigmoid gate scalings; pooling/norm/activation/resize excluded")

GATED_TYPES = (CARM, SARM, FFM, SIM)


@dataclass
class BlockCost:
    name: str
    params: int = None
    flops: int = None
    time_total_ms: float = None
    time_max_op_ms: float = None
    time_jitter_ms: float = None

    def merged(self, other):
        values = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        for f in dataclasses.fields(other):
            if getattr(other, f.name) is not None:
                values[f.name] = getattr(other, f.name)
        return BlockCost(**values)


@dataclass
class CostReport:
    variant: str
    input_size: tuple
    convention: str
    blocks: list = field(default_factory=list)
    environment: dict = field(default_factory=dict)
    reference: dict = None
    metadata: dict = field(default_factory=dict)

    def block(self, name):
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    @property
    def totals(self):
        out = {}
        for key in ("params", "flops", "time_total_ms"):
            values = [getattr(b, key) for b in self.blocks if getattr(b, key) is not None]
            if values:
                out[key] = sum(values)
        return out

    def merged(self, other):
        merged_blocks = []
        names = [b.name for b in self.blocks]
        for b in self.blocks:
            try:
                merged_blocks.append(b.merged(other.block(b.name)))
            except KeyError:
                merged_blocks.append(b)
        for b in other.blocks:
            if b.name not in names:
                merged_blocks.append(b)
        return CostReport(variant=self.variant, input_size=self.input_size,
                          convention=self.convention, blocks=merged_blocks,
                          environment={**self.environment, **other.environment},
                          reference=self.reference or other.reference,
                          metadata={**self.metadata, **other.metadata})

    def to_dict(self):
        return {
            "variant": self.variant,
            "input_size": list(self.input_size),
            "flop_convention": self.convention,
            "blocks": [dataclasses.asdict(b) for b in self.blocks],
            "totals": self.totals,
            "environment": self.environment,
            "reference": self.reference,
            "metadata": self.metadata,
            "version": __version__,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_table(self):
        """Aligned text table: block, params (M), FLOPs (B), total/max op time (ms)."""
        header = (f"{'Block':<12} {'Parameters (M)':>15} {'FLOPs (B)':>12} "
                  f"{'Total time (ms)':>16} {'Max op (ms)':>12}")
        lines = [f"variant: {self.variant}  input: {self.input_size[0]}x{self.input_size[1]}",
                 f"flops: {self.convention}", header, "-" * len(header)]

        def fmt(value, scale, pattern):
            return pattern.format(value / scale) if value is not None else "-"

        for b in self.blocks:
            lines.append(f"{b.name:<12} {fmt(b.params, 1e6, '{:.3f}'):>15} "
                         f"{fmt(b.flops, 1e9, '{:.4f}'):>12} "
                         f"{fmt(b.time_total_ms, 1, '{:.2f}'):>16} "
                         f"{fmt(b.time_max_op_ms, 1, '{:.2f}'):>12}")
        totals = self.totals
        lines.append("-" * len(header))
        lines.append(f"{'total':<12} {fmt(totals.get('params'), 1e6, '{:.3f}'):>15} "
                     f"{fmt(totals.get('flops'), 1e9, '{:.4f}'):>12} "
                     f"{fmt(totals.get('time_total_ms'), 1, '{:.2f}'):>16} "
                     f"{'':>12}")
        return "\n".join(lines)


def _environment():
    return {"python": platform.python_version(), "torch": torch.__version__,
            "platform": platform.platform(), "threads": torch.get_num_threads()}


def _named_blocks(model):
    if hasattr(model, "named_blocks"):
        return model.named_blocks()
    return {"model": model}


def count_params(model, input_size=None):
    """Exact trainable-parameter count per named block."""
    blocks = []
    for name, module in _named_blocks(model).items():
        blocks.append(BlockCost(name=name,
                                params=sum(p.numel() for p in module.parameters())))
    cfg = getattr(model, "config", None)
    return CostReport(variant=cfg.variant if cfg else type(model).__name__,
                      input_size=tuple(input_size or (cfg.input_size if cfg else (0, 0))),
                      convention=FLOP_CONVENTION, blocks=blocks,
                      environment=_environment())


def _conv_macs(mod, out):
    k = mod.kernel_size[0] * mod.kernel_size[1]
    return (mod.in_channels // mod.groups) * k * mod.out_channels \
        * out.shape[-2] * out.shape[-1]


def _meta_model(model):
    if next(model.parameters()).is_meta:
        return model
    cfg = getattr(model, "config", None)
    if cfg is not None:
        with torch.device("meta"):
            return build(replace(cfg, backbone_weights=None))
    return copy.deepcopy(model).to("meta")


def count_flops(model, input_size=None, model_on_meta=None, inputs=None):
    """Analytic per-block multiply counts at the given input resolution.

    Shapes normally come from a meta-device forward pass of an equivalent
    module, so arbitrarily large graphs cost nothing to analyse.  Works on
    full models (image + IMU forward) and on bare single-input modules such
    as encoders.  Passing ``inputs`` instead runs the model itself on those
    tensors and captures shapes from the real forward.
    """
    cfg = getattr(model, "config", None)
    if input_size is None and cfg is not None:
        input_size = cfg.input_size
    if input_size is None and inputs is not None:
        input_size = tuple(inputs[0].shape[-2:])
    input_size = tuple(input_size)
    clone = model if inputs is not None else (model_on_meta or _meta_model(model))
    owner = {}
    for name, blockmod in _named_blocks(clone).items():
        for m in blockmod.modules():
            owner[id(m)] = name
    counts = defaultdict(int)
    hooks = []

    def on_conv(mod, _inp, out):
        counts[owner[id(mod)]] += _conv_macs(mod, out)

    def on_linear(mod, _inp, _out):
        counts[owner[id(mod)]] += mod.in_features * mod.out_features

    def on_gate(mod, _inp, out):
        counts[owner[id(mod)]] += out.shape[-3] * out.shape[-2] * out.shape[-1]

    for m in clone.modules():
        if isinstance(m, nn.Conv2d):
            hooks.append(m.register_forward_hook(on_conv))
        elif isinstance(m, nn.Linear):
            hooks.append(m.register_forward_hook(on_linear))
        if isinstance(m, GATED_TYPES):
            hooks.append(m.register_forward_hook(on_gate))
    clone.eval()
    try:
        with torch.no_grad():
            if inputs is not None:
                clone(*inputs)
            else:
                image = torch.empty(1, 3, *input_size, device="meta")
                if hasattr(clone, "named_blocks"):
                    clone(image, torch.empty(1, 1, *input_size, device="meta"))
                else:
                    clone(image)
    finally:
        for h in hooks:
            h.remove()
    blocks = [BlockCost(name=name, flops=counts.get(name, 0))
              for name in _named_blocks(clone)]
    return CostReport(variant=cfg.variant if cfg else type(model).__name__,
                      input_size=input_size,
                      convention=FLOP_CONVENTION, blocks=blocks,
                      environment=_environment())


def time_blocks(model, image, imu, repeats=5, warmup=1, exclusive=False):
    """Wall-time per block: median block time, slowest inner op, jitter.

    Measures ``repeats`` forward passes after ``warmup`` discarded ones.
    ``exclusive`` records whether the host was reserved for the measurement.
    """
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    model.eval()
    blocks = _named_blocks(model)
    leaf_owner = {}
    block_ids = {id(m): name for name, m in blocks.items()}
    for name, blockmod in blocks.items():
        for m in blockmod.modules():
            if not list(m.children()):
                leaf_owner[id(m)] = name
    starts = {}
    block_time = defaultdict(float)
    max_op = defaultdict(float)
    hooks = []

    def pre(mod, _inp):
        starts[id(mod)] = time.perf_counter()

    def post(mod, _inp, _out):
        dt = (time.perf_counter() - starts[id(mod)]) * 1e3
        key = id(mod)
        if key in block_ids:
            block_time[block_ids[key]] += dt
        if key in leaf_owner:
            name = leaf_owner[key]
            if dt > max_op[name]:
                max_op[name] = dt

    for name, blockmod in blocks.items():
        hooks.append(blockmod.register_forward_pre_hook(pre))
        hooks.append(blockmod.register_forward_hook(post))
        for m in blockmod.modules():
            if id(m) in leaf_owner and id(m) not in block_ids:
                hooks.append(m.register_forward_pre_hook(pre))
                hooks.append(m.register_forward_hook(post))

    runs = {name: {"total": [], "max_op": []} for name in blocks}
    try:
        with torch.no_grad():
            for i in range(warmup + repeats):
                block_time.clear()
                max_op.clear()
                model(image, imu)
                if i >= warmup:
                    for name in blocks:
                        runs[name]["total"].append(block_time.get(name, 0.0))
                        runs[name]["max_op"].append(max_op.get(name, 0.0))
    finally:
        for h in hooks:
            h.remove()

    out_blocks = []
    for name in blocks:
        totals = runs[name]["total"]
        out_blocks.append(BlockCost(
            name=name,
            time_total_ms=statistics.median(totals),
            time_max_op_ms=statistics.median(runs[name]["max_op"]),
            time_jitter_ms=statistics.pstdev(totals) if len(totals) > 1 else 0.0))
    cfg = getattr(model, "config", None)
    env = _environment()
    env.update(repeats=repeats, warmup=warmup, exclusive_host=exclusive)
    return CostReport(variant=cfg.variant if cfg else type(model).__name__,
                      input_size=tuple(image.shape[-2:]),
                      convention=FLOP_CONVENTION, blocks=out_blocks, environment=env)


def full_report(model, input_size=None, repeats=0, reference=None):
    """Params + FLOPs, optionally timing, in one merged report."""
    report = count_params(model, input_size).merged(count_flops(model, input_size))
    if repeats:
        size = tuple(input_size or model.config.input_size)
        image = torch.rand(1, 3, *size)
        imu = torch.zeros(1, 1, *size)
        report = report.merged(time_blocks(model, image, imu, repeats=repeats))
    report.reference = reference
    return report


# ---------------------------------------------------------------------------
# replacement ablation harness


def replacement_sweep(config, input_size=None):
    """FLOP totals of each single-block conv1x1 replacement vs the original graph."""
    input_size = tuple(input_size or config.input_size)
    with torch.device("meta"):
        base_model = build(replace(config, backbone_weights=None))
    base = count_flops(base_model, input_size, model_on_meta=base_model).totals["flops"]
    rows = []
    for name in REPLACEABLE_BLOCKS:
        variant_cfg = replace(config, block_replacements={name: "conv1x1"},
                              backbone_weights=None)
        with torch.device("meta"):
            variant = build(variant_cfg)
        flops = count_flops(variant, input_size, model_on_meta=variant).totals["flops"]
        rows.append({"replaced_block": name, "flops_total": flops,
                     "flops_delta": flops - base})
    return {"variant": config.variant, "input_size": list(input_size),
            "flop_convention": FLOP_CONVENTION, "flops_original_total": base,
            "replacements": rows, "version": __version__}


# ---------------------------------------------------------------------------
# gate statistics


def _sample_tensors(sample):
    images, _, imus = batch_tensors([sample])
    return images, imus


def _recording_gates(model, types):
    gates = {}
    for name, module in model.named_modules():
        if isinstance(module, types):
            gates[name] = module
    return gates


def channel_weight_diversity(model, samples, bins=50):
    """Per-channel stds of channel re-weighting activations across a dataset.

    For every channel-gate (CARM and FFM re-weighting) the sigmoid activations
    are collected over all samples; the per-channel population standard
    deviations and their histogram over [0, 0.5] are returned.
    """
    model.eval()
    gates = _recording_gates(model, (CARM, FFM))
    for module in gates.values():
        module.record_gates = True
    collected = {name: [] for name in gates}
    try:
        with torch.no_grad():
            for sample in samples:
                image, imu = _sample_tensors(sample)
                model(image, imu)
                for name, module in gates.items():
                    collected[name].append(
                        module.latest_gate[0, :, 0, 0].cpu().numpy().copy())
    finally:
        for module in gates.values():
            module.record_gates = False
            module.latest_gate = None
    out = {}
    for name, rows in collected.items():
        stack = np.stack(rows).astype(np.float64)    # [n_samples, C]
        stds = stack.std(axis=0)                     # population std, bounded by 0.5
        hist, edges = np.histogram(stds, bins=bins, range=(0.0, 0.5))
        out[name] = {"channels": int(stack.shape[1]),
                     "per_channel_std": stds.tolist(),
                     "hist_counts": hist.tolist(),
                     "bin_edges": edges.tolist()}
    return out


def imu_channel_weight(model, sample):
    """Sigmoid gate weight of the IMU channel for each gate that consumes it."""
    model.eval()
    gates = {name: m for name, m in _recording_gates(model, CARM).items()
             if m.imu_channel is not None}
    if not gates:
        return {}
    for module in gates.values():
        module.record_gates = True
    try:
        with torch.no_grad():
            image, imu = _sample_tensors(sample)
            model(image, imu)
            return {name: float(m.latest_gate[0, m.imu_channel, 0, 0])
                    for name, m in gates.items()}
    finally:
        for module in gates.values():
            module.record_gates = False
            module.latest_gate = None


def rank_by_imu_weight(model, samples):
    """Samples sorted by descending IMU-channel gate weight (stable on ties).

    Uses the first gate name alphabetically as the ranking key so the order is
    independent of the input list order.
    """
    rows = []
    for sample in samples:
        weights = imu_channel_weight(model, sample)
        rows.append({"stem": sample.stem, "weights": weights})
    if rows and rows[0]["weights"]:
        key_gate = sorted(rows[0]["weights"])[0]
        rows.sort(key=lambda r: (-r["weights"][key_gate], r["stem"]))
    return rows
