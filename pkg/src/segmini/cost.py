"""Analytic multiply-accumulate (MAC) and parameter accounting.

One MAC is one multiply plus one accumulate. Work that is not a MAC is
tallied separately as "other ops": one per bias add, ReLU comparison and
softmax exponential, three comparisons per 2x2 max-pool window, and two
per batchnorm element (the inference-time scale and shift).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

from .errors import ShapeError
from .model import BN_PARAMS, BN_TRAINABLE, ModelConfig, check_config

VARIANTS = ("full", "depthwise", "pointwise", "separable")


def _out_dim(size: int, k: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-size // stride)
    if padding == "valid":
        if size < k:
            raise ShapeError(f"input extent {size} smaller than kernel {k} under valid padding")
        return (size - k) // stride + 1
    raise ShapeError(f"padding must be 'same' or 'valid', got {padding!r}")


def _split_shape(in_shape):
    dims = tuple(int(d) for d in in_shape)
    if len(dims) == 3:
        dims = (1,) + dims
    if len(dims) != 4 or min(dims) < 1:
        raise ShapeError(f"expected (n, c, h, w) or (c, h, w) with positive dims, got {in_shape}")
    return dims


def conv_macs(in_shape, out_channels: int, k: int, stride: int = 1, padding: str = "same",
              variant: str = "full") -> int:
    """MACs of one convolution over an ``(n, c, h, w)`` or ``(c, h, w)`` input.

    For the separable variant the stride belongs to the depthwise stage, so
    the pointwise stage runs at the reduced resolution.
    """
    n, c, h, w = _split_shape(in_shape)
    if out_channels < 1 or k < 1 or stride < 1:
        raise ShapeError("out_channels, k and stride must be positive")
    if variant not in VARIANTS:
        raise ShapeError(f"variant must be one of {VARIANTS}, got {variant!r}")
    if variant == "pointwise":
        k = 1
    pixels = n * _out_dim(h, k, stride, padding) * _out_dim(w, k, stride, padding)
    if variant == "full":
        return pixels * out_channels * c * k * k
    if variant == "depthwise":
        return pixels * c * k * k
    if variant == "pointwise":
        return pixels * c * out_channels
    return pixels * c * k * k + pixels * c * out_channels


def separable_ratio(c_out: int, k: int) -> float:
    """``1/c_out + 1/k^2``: separable MACs as a fraction of full MACs."""
    return float(separable_ratio_exact(c_out, k))


def separable_ratio_exact(c_out: int, k: int) -> Fraction:
    if c_out < 1 or k < 1:
        raise ValueError("c_out and k must be >= 1")
    return Fraction(1, c_out) + Fraction(1, k * k)


@dataclass(frozen=True)
class LayerCost:
    name: str
    macs: int
    params: int
    out_shape: tuple
    full_macs: int = 0   # cost of the same layer as an undecomposed convolution
    full_params: int = 0
    other_ops: int = 0
    buffers: int = 0     # non-trained state such as batchnorm running statistics

    @property
    def ratio(self) -> float | None:
        return self.macs / self.full_macs if self.full_macs else None


@dataclass
class CostReport:
    input_shape: tuple
    layers: list = field(default_factory=list)

    @property
    def total_macs(self) -> int:
        return sum(l.macs for l in self.layers)

    @property
    def total_params(self) -> int:
        return sum(l.params for l in self.layers)

    @property
    def total_full_macs(self) -> int:
        return sum(l.full_macs if l.full_macs else l.macs for l in self.layers)

    @property
    def total_full_params(self) -> int:
        return sum(l.full_params if l.full_params else l.params for l in self.layers)

    @property
    def total_other_ops(self) -> int:
        return sum(l.other_ops for l in self.layers)

    @property
    def total_buffers(self) -> int:
        return sum(l.buffers for l in self.layers)

    @property
    def ratio(self) -> float:
        return self.total_macs / self.total_full_macs if self.total_full_macs else 1.0

    def to_table(self) -> str:
        header = ("layer", "output", "macs", "full_macs", "ratio", "params", "other_ops")
        rows = []
        for l in self.layers:
            ratio = f"{l.ratio:.4f}" if l.ratio is not None else "-"
            full = str(l.full_macs) if l.full_macs else "-"
            rows.append((l.name, "x".join(map(str, l.out_shape)), str(l.macs), full, ratio,
                         str(l.params), str(l.other_ops)))
        rows.append(("total", "", str(self.total_macs), str(self.total_full_macs), f"{self.ratio:.4f}",
                     str(self.total_params), str(self.total_other_ops)))
        widths = [max(len(r[i]) for r in rows + [header]) for i in range(len(header))]
        fmt = lambda r: "  ".join(c.ljust(wd) if i < 2 else c.rjust(wd)
                                  for i, (c, wd) in enumerate(zip(r, widths)))
        lines = [fmt(header), "  ".join("-" * wd for wd in widths)]
        lines += [fmt(r) for r in rows[:-1]]
        lines += ["  ".join("-" * wd for wd in widths), fmt(rows[-1])]
        return "\n".join(lines)

    def to_kv(self) -> list[str]:
        lines = [f"input_shape={'x'.join(map(str, self.input_shape))}"]
        for i, l in enumerate(self.layers):
            lines.append(f"layer.{i}.name={l.name}")
            lines.append(f"layer.{i}.macs={l.macs}")
            lines.append(f"layer.{i}.full_macs={l.full_macs}")
            lines.append(f"layer.{i}.params={l.params}")
            lines.append(f"layer.{i}.other_ops={l.other_ops}")
        lines += [f"total.macs={self.total_macs}", f"total.full_macs={self.total_full_macs}",
                  f"total.params={self.total_params}", f"total.full_params={self.total_full_params}",
                  f"total.buffers={self.total_buffers}", f"total.other_ops={self.total_other_ops}",
                  f"separable_vs_full={self.ratio:.6f}"]
        return lines


def model_cost(config: ModelConfig, input_shape) -> CostReport:
    """Per-layer and total costs of ``config`` on one input of ``(h, w)`` or ``(c, h, w)``.

    ``params`` counts trained arrays only, matching ``Model.param_count``;
    batchnorm running statistics go to ``buffers``.
    """
    check_config(config)
    dims = tuple(int(d) for d in input_shape)
    if len(dims) == 2:
        dims = (config.input_channels,) + dims
    if len(dims) != 3 or min(dims) < 1:
        raise ShapeError(f"input_shape must be (h, w) or (c, h, w), got {input_shape}")
    c, h, w = dims
    if c != config.input_channels:
        raise ShapeError(f"config expects {config.input_channels} input channels, got {c}")
    d = config.divisor
    if h % d or w % d:
        raise ShapeError(f"input {h}x{w} must be divisible by {d}")
    report = CostReport((c, h, w))
    counts: dict[str, int] = {}
    for spec in config.layers:
        counts[spec.kind] = counts.get(spec.kind, 0) + 1
        name = f"{spec.kind}{counts[spec.kind]}"
        if spec.kind == "sepconv_relu":
            k, o, s = spec.kernel_size, spec.channels_out, spec.stride
            macs = conv_macs((c, h, w), o, k, s, "same", "separable")
            full = conv_macs((c, h, w), o, k, s, "same", "full")
            h, w = -(-h // s), -(-w // s)
            elems = o * h * w
            layer = LayerCost(name, macs, c * k * k + c * o + o, (o, h, w), full, o * c * k * k + o,
                              other_ops=2 * elems)
            c = o
        elif spec.kind == "batchnorm":
            layer = LayerCost(name, 0, c * len(BN_TRAINABLE), (c, h, w), other_ops=2 * c * h * w,
                              buffers=c * (len(BN_PARAMS) - len(BN_TRAINABLE)))
        elif spec.kind == "maxpool":
            h, w = h // 2, w // 2
            layer = LayerCost(name, 0, 0, (c, h, w), other_ops=3 * c * h * w)
        elif spec.kind == "upsample":
            h, w = h * 2, w * 2
            layer = LayerCost(name, 0, 0, (c, h, w))
        else:
            layer = LayerCost(name, 0, 0, (c, h, w), other_ops=c * h * w)
        report.layers.append(layer)
    return report
