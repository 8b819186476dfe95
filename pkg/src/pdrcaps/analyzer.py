"""Static cost model: output sizes, parameters, MACs/FLOPs, receptive fields, NC metric.

Everything here works from an :class:`~pdrcaps.model.ArchConfig` alone, no
weights are allocated.  Counting conventions:

* conv / linear / capsule transforms: FLOPs = 2 x MACs (bias adds ignored)
* batchnorm, relu, squash, softmax, averaging, masking, sigmoid: 1 FLOP per
  element touched, 0 MACs
* routing: predictions once per forward, weighted sums once per iteration,
  agreement dot products between iterations
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .errors import ContractError, DimensionError
from .model import ArchConfig, LayerSpec, branch_capsules, layer_output_shape
from .tensor import output_size as _output_size

DEFAULT_BATCH = 128


def output_size(w, f, padding=0, stride=1):
    """``floor((W - f + 2P) / S) + 1``; raises on underflow."""
    return _output_size(w, f, padding, stride)


def conv_params(f, n_c, k):
    """Weights plus one bias per filter: ``(f*f*n_c + 1) * K``."""
    return (f * f * n_c + 1) * k


def param_count(layer):
    """Trainable parameters of one :class:`LayerSpec`.

    Batchnorm also carries ``2*C`` running statistics; see :func:`buffer_count`.
    """
    if layer.kind in ("conv3x3", "conv9x9"):
        return conv_params(layer.kernel, layer.in_channels, layer.out_channels)
    if layer.kind == "depthwise_separable":
        depthwise = layer.kernel * layer.kernel * layer.in_channels
        pointwise = (layer.in_channels + 1) * layer.out_channels
        return depthwise + pointwise
    if layer.kind == "batchnorm":
        return 2 * layer.in_channels
    return 0


def buffer_count(layer):
    return 2 * layer.in_channels if layer.kind == "batchnorm" else 0


def linear_params(n_in, n_out):
    return (n_in + 1) * n_out


def mac_count(layer, input_shape, batch=1):
    """MACs of one layer spec applied to ``input_shape`` = (C, H, W)."""
    if not layer.spatial:
        return 0
    c, h, w = input_shape
    _, ho, wo = layer_output_shape(layer, input_shape)
    f = layer.kernel
    if layer.kind == "depthwise_separable":
        return batch * ho * wo * (f * f * c + c * layer.out_channels)
    return batch * ho * wo * layer.out_channels * f * f * c


def conv_macs(h_out, w_out, k, f, n_c, batch=1):
    return batch * h_out * w_out * k * f * f * n_c


def linear_macs(n_in, n_out, batch=1):
    return batch * n_in * n_out


def routing_macs(n_in, n_out, d_in, d_out, iterations, batch=1):
    """Predictions once, a weighted sum every iteration, an agreement update between iterations."""
    return batch * (n_in * n_out * d_in * d_out + (2 * iterations - 1) * n_in * n_out * d_out)


def _elementwise_flops(layer, shape, batch):
    c, h, w = shape
    return batch * c * h * w if layer.kind in ("batchnorm", "relu") else 0


def receptive_field(chain):
    """Receptive field (pixels, one side) of a chain of layer specs.

    Uses ``r <- r + (f - 1) * jump; jump <- jump * S`` from ``r = jump = 1``.
    Entries may also be ``(kernel, stride)`` pairs.
    """
    r, jump = 1, 1
    for item in chain:
        if isinstance(item, LayerSpec):
            if not item.spatial:
                continue
            f, s = item.kernel, item.stride
        else:
            f, s = item
        r += (f - 1) * jump
        jump *= s
    return r


# --------------------------------------------------------------------------- network complexity


@dataclass(frozen=True)
class NCParams:
    test_time: float
    accuracy: float
    n: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ContractError(f"accuracy must lie in [0, 1], got {self.accuracy}")
        if not self.n > 0:
            raise ContractError(f"exponent n must be positive, got {self.n}")
        if not self.test_time > 0:
            raise ContractError(f"test_time must be positive, got {self.test_time}")


def network_complexity(p):
    """``test_time * (1 - accuracy) ** (1 / n)``; lower is better."""
    return p.test_time * (1.0 - p.accuracy) ** (1.0 / p.n)


def nc_sweep(entries, ns):
    """NC for every ``(label, test_time, accuracy)`` entry and every ``n``.

    Returns rows ``(label, n, nc)`` ordered by entry then ``n``.
    """
    rows = []
    for label, test_time, accuracy in entries:
        for n in ns:
            rows.append((label, n, network_complexity(NCParams(test_time, accuracy, n))))
    return rows


# --------------------------------------------------------------------------- full report


@dataclass
class LayerCost:
    name: str
    kind: str
    output_shape: tuple
    params: int = 0
    buffers: int = 0
    macs: int = 0
    flops: int = 0
    receptive_field: int = 0


@dataclass
class CostReport:
    name: str
    batch_size: int
    layers: list = field(default_factory=list)
    capsules: list = field(default_factory=list)

    @property
    def params(self):
        return sum(l.params for l in self.layers)

    @property
    def inference_params(self):
        return sum(l.params for l in self.layers if not l.name.startswith("decoder"))

    @property
    def decoder_params(self):
        return self.params - self.inference_params

    @property
    def buffers(self):
        return sum(l.buffers for l in self.layers)

    @property
    def macs(self):
        return sum(l.macs for l in self.layers)

    @property
    def flops(self):
        return sum(l.flops for l in self.layers)

    @property
    def total_capsules(self):
        return sum(self.capsules)

    def inference_macs(self):
        return sum(l.macs for l in self.layers if not l.name.startswith("decoder"))

    def inference_flops(self):
        return sum(l.flops for l in self.layers if not l.name.startswith("decoder"))

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer", "kind", "output_shape", "params", "buffers", "macs", "flops",
                         "receptive_field"])
        for l in self.layers:
            writer.writerow([l.name, l.kind, "x".join(str(v) for v in l.output_shape), l.params,
                             l.buffers, l.macs, l.flops, l.receptive_field])
        writer.writerow(["TOTAL", "", "", self.params, self.buffers, self.macs, self.flops, ""])
        return buf.getvalue()

    def to_text(self):
        lines = [f"model {self.name}  (batch {self.batch_size})",
                 f"{'layer':<34}{'kind':<22}{'output':>14}{'params':>12}{'MACs':>18}{'FLOPs':>18}{'RF':>6}"]
        for l in self.layers:
            shape = "x".join(str(v) for v in l.output_shape)
            lines.append(f"{l.name:<34}{l.kind:<22}{shape:>14}{l.params:>12,}{l.macs:>18,}{l.flops:>18,}"
                         f"{l.receptive_field or '':>6}")
        lines += [
            f"primary capsules: {' + '.join(str(c) for c in self.capsules)} = {self.total_capsules}",
            f"parameters: {self.params:,} total, {self.inference_params:,} without decoder, "
            f"{self.buffers:,} batchnorm buffers",
            f"MACs: {self.macs:,} ({human(self.macs)})   FLOPs: {self.flops:,} ({human(self.flops)})",
        ]
        return "\n".join(lines)


def human(n):
    for unit, scale in (("G", 1e9), ("M", 1e6), ("K", 1e3)):
        if abs(n) >= scale:
            return f"{n / scale:.2f}{unit}"
    return str(n)


def _spatial_cost(spec, shape, batch, name, rf_chain):
    out = layer_output_shape(spec, shape, where=name)
    macs = mac_count(spec, shape, batch)
    flops = 2 * macs + _elementwise_flops(spec, out, batch)
    rf = receptive_field(rf_chain) if spec.spatial else 0
    return out, LayerCost(name, spec.kind, out, param_count(spec), buffer_count(spec), macs, flops, rf)


def analyze(cfg: ArchConfig, batch=DEFAULT_BATCH):
    """Per-layer cost report for ``cfg`` at the given batch size."""
    report = CostReport(cfg.name, batch)
    if not cfg.branches and not cfg.stem:
        return report
    shape = cfg.input_shape
    chain = []
    for i, spec in enumerate(cfg.stem):
        chain.append(spec)
        shape, cost = _spatial_cost(spec, shape, batch, f"stem.{i}", chain)
        report.layers.append(cost)
    stem_shape, stem_chain = shape, list(chain)

    k, d_out = cfg.n_classes, cfg.class_caps_dim
    for b, br in enumerate(cfg.branches):
        shape, chain = stem_shape, list(stem_chain)
        for i, spec in enumerate(br.layers):
            chain.append(spec)
            shape, cost = _spatial_cost(spec, shape, batch, f"branch{b + 1}.{i}", chain)
            report.layers.append(cost)
        c, h, w = shape
        n_caps = branch_capsules(cfg, b)
        report.capsules.append(n_caps)
        ho = output_size(h, br.cfc_kernel, 0, br.cfc_stride)
        wo = output_size(w, br.cfc_kernel, 0, br.cfc_stride)
        width = br.caps_dim * br.caps_types
        cfc_macs = conv_macs(ho, wo, width, br.cfc_kernel, c, batch)
        squash_flops = batch * n_caps * br.caps_dim
        chain.append((br.cfc_kernel, br.cfc_stride))
        report.layers.append(LayerCost(f"branch{b + 1}.cfc", "cfc", (n_caps, br.caps_dim),
                                       conv_params(br.cfc_kernel, c, width), 0, cfc_macs,
                                       2 * cfc_macs, receptive_field(chain)))
        report.layers.append(LayerCost(f"branch{b + 1}.squash", "squash", (n_caps, br.caps_dim),
                                       flops=squash_flops))
        r = br.iterations
        rmacs = routing_macs(n_caps, k, br.caps_dim, d_out, r, batch)
        # per iteration: softmax over logits, squash of outputs
        rflops = 2 * rmacs + r * batch * (n_caps * k + k * d_out)
        report.layers.append(LayerCost(f"branch{b + 1}.routing", "routing", (k, d_out),
                                       n_caps * k * br.caps_dim * d_out, 0, rmacs, rflops))
    if len(cfg.branches) > 1:
        report.layers.append(LayerCost("average", "average", (k, d_out), 0, 0, 0,
                                       batch * len(cfg.branches) * k * d_out))
    if cfg.use_decoder and cfg.branches:
        width = k * d_out
        dims = list(cfg.decoder_hidden) + [cfg.pixels]
        for i, h in enumerate(dims):
            macs = linear_macs(width, h, batch)
            act = "sigmoid" if i == len(dims) - 1 else "relu"
            report.layers.append(LayerCost(f"decoder.{i}", "linear", (h,), linear_params(width, h), 0,
                                           macs, 2 * macs))
            report.layers.append(LayerCost(f"decoder.{i}.{act}", act, (h,), flops=batch * h))
            width = h
    return report


def footnote_comparison(w=32, channels=256):
    """Four stacked 3x3 convs versus one 9x9 conv at ``n_c = K = channels``.

    Both reduce a ``w``-wide input by eight pixels.
    """
    three = [conv_params(3, channels, channels) for _ in range(4)]
    size3 = w
    for _ in range(4):
        size3 = output_size(size3, 3)
    return {
        "output_3x3_single": output_size(w, 3),
        "output_9x9": output_size(w, 9),
        "output_3x3_x4": size3,
        "params_3x3_each": three[0],
        "params_3x3_x4": sum(three),
        "params_9x9": conv_params(9, channels, channels),
        "rf_3x3_x4": receptive_field([(3, 1)] * 4),
        "rf_9x9": receptive_field([(9, 1)]),
    }


def footnote_text(w=32, channels=256):
    fc = footnote_comparison(w, channels)
    return "\n".join([
        f"output size W={w}: 3x3 -> {fc['output_3x3_single']}, 9x9 -> {fc['output_9x9']}, "
        f"four 3x3 -> {fc['output_3x3_x4']}",
        f"params n_c=K={channels}: four 3x3 = {fc['params_3x3_x4']:,} ({human(fc['params_3x3_x4'])}), "
        f"one 9x9 = {fc['params_9x9']:,} ({human(fc['params_9x9'])})",
        f"receptive field: four 3x3 = {fc['rf_3x3_x4']}, one 9x9 = {fc['rf_9x9']}",
    ])


def compare_text(reports):
    """Side-by-side totals for several reports."""
    header = f"{'model':<16}{'capsules':>10}{'params':>14}{'no-decoder':>14}{'MACs':>12}{'FLOPs':>12}"
    lines = [header]
    for r in reports:
        lines.append(f"{r.name:<16}{r.total_capsules:>10}{r.params:>14,}{r.inference_params:>14,}"
                     f"{human(r.macs):>12}{human(r.flops):>12}")
    return "\n".join(lines)


def relative_delta(value, target):
    if target == 0:
        raise DimensionError("relative delta against zero target", axis="target")
    return (value - target) / target

