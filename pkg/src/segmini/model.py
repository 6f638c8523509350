"""Encoder-decoder layer chain: configuration, inference and model files."""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import ops
from .errors import ConfigError, FormatError, ShapeError
from .ops import BatchNormParams, ConvParams
from .tensor import DTYPE, check_tensor

LAYER_KINDS = ("sepconv_relu", "maxpool", "batchnorm", "upsample", "softmax")
DOWNSAMPLE_MODES = ("maxpool", "strided_conv")
DEFAULT_WIDTHS = (8, 16, 32, 64)
LABEL_DTYPE = np.uint8
MAGIC = b"BBSEG1\0"
FORMAT_VERSION = 1

SEPCONV_PARAMS = ("dw_weight", "pw_weight", "pw_bias")
BN_PARAMS = ("gamma", "beta", "running_mean", "running_var")
BN_TRAINABLE = ("gamma", "beta")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    channels_out: int | None = None
    kernel_size: int = 3
    stride: int = 1

    def to_text(self) -> str:
        if self.kind == "sepconv_relu":
            return (f"layer=sepconv_relu channels_out={self.channels_out} "
                    f"kernel_size={self.kernel_size} stride={self.stride}")
        return f"layer={self.kind}"


@dataclass(frozen=True)
class ModelConfig:
    class_count: int = 2
    layers: tuple[LayerSpec, ...] = ()
    input_channels: int = 3
    downsample_mode: str = "maxpool"

    @property
    def downsample_count(self) -> int:
        return sum(1 for l in self.layers
                   if l.kind == "maxpool" or (l.kind == "sepconv_relu" and l.stride == 2))

    @property
    def divisor(self) -> int:
        return 2 ** self.downsample_count

    def to_text(self) -> str:
        lines = [
            f"input_channels={self.input_channels}",
            f"class_count={self.class_count}",
            f"downsample_mode={self.downsample_mode}",
        ]
        lines += [l.to_text() for l in self.layers]
        return "\n".join(lines) + "\n"


def default_config(class_count: int = 2, widths=DEFAULT_WIDTHS, downsample_mode: str = "maxpool",
                   kernel_size: int = 3, input_channels: int = 3) -> ModelConfig:
    """Three-stage encoder, bottleneck, three-stage decoder, pixelwise softmax.

    ``widths`` gives the E1..E4 channel counts; the decoder mirrors them
    back down to ``class_count``.
    """
    if class_count < 2:
        raise ConfigError("class_count must be at least 2")
    if downsample_mode not in DOWNSAMPLE_MODES:
        raise ConfigError(f"downsample_mode must be one of {DOWNSAMPLE_MODES}")
    w1, w2, w3, w4 = widths
    strided = downsample_mode == "strided_conv"

    def sep(c, stride=1):
        return LayerSpec("sepconv_relu", c, kernel_size, stride)

    bn, pool, up = LayerSpec("batchnorm"), LayerSpec("maxpool"), LayerSpec("upsample")
    layers = [bn]
    for c in (w1, w2, w3):
        layers += [sep(c, 2), bn] if strided else [sep(c), pool, bn]
    layers += [sep(w4), bn]                      # E4
    layers += [sep(w4), bn]                      # D1
    layers += [up, sep(w3), bn, up, sep(w2), bn]  # D2, D3
    layers += [up, sep(class_count)]             # D4
    layers += [LayerSpec("softmax")]
    return ModelConfig(class_count, tuple(layers), input_channels, downsample_mode)


def parse_config(text: str) -> ModelConfig:
    """Parse the ``key=value`` config format.

    Without any ``layer=`` lines the default chain is built from
    ``class_count``, ``widths``, ``kernel_size`` and ``downsample_mode``.
    """
    top: dict[str, str] = {}
    layers = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = {}
        for tok in line.split():
            key, sep, value = tok.partition("=")
            if not sep:
                raise ConfigError(f"line {lineno}: expected key=value, got {tok!r}")
            fields[key] = value
        if "layer" in fields:
            kind = fields.pop("layer")
            try:
                opts = {k: int(v) for k, v in fields.items()}
                layers.append(LayerSpec(kind, **opts))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"line {lineno}: bad layer fields ({exc})") from None
        else:
            top.update(fields)
    known = {"input_channels", "class_count", "downsample_mode", "widths", "kernel_size"}
    unknown = set(top) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        class_count = int(top.get("class_count", 2))
        input_channels = int(top.get("input_channels", 3))
        mode = top.get("downsample_mode", "maxpool")
        if layers:
            return ModelConfig(class_count, tuple(layers), input_channels, mode)
        widths = tuple(int(v) for v in top.get("widths", "8,16,32,64").split(","))
        if len(widths) != 4:
            raise ConfigError("widths needs four comma-separated values")
        return default_config(class_count, widths, mode, int(top.get("kernel_size", 3)), input_channels)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad config value ({exc})") from None


def load_config(source: str, class_count: int | None = None) -> ModelConfig:
    """``"default"`` or a path to a config file."""
    if source == "default":
        return default_config(class_count or 2)
    try:
        text = Path(source).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {source}: {exc.strerror}") from None
    cfg = parse_config(text)
    if class_count is not None and class_count != cfg.class_count:
        raise ConfigError(f"config has class_count={cfg.class_count}, --classes asked for {class_count}")
    return cfg


def validate(config: ModelConfig) -> list[str]:
    """Return every violated invariant; an empty list means the config is usable."""
    errors = []
    if config.class_count < 2:
        errors.append(f"class_count must be >= 2, got {config.class_count}")
    if config.class_count > 256:
        errors.append("class_count must be <= 256 (labels are stored as bytes)")
    if config.input_channels < 1:
        errors.append(f"input_channels must be >= 1, got {config.input_channels}")
    if config.downsample_mode not in DOWNSAMPLE_MODES:
        errors.append(f"downsample_mode must be one of {DOWNSAMPLE_MODES}, got {config.downsample_mode!r}")
    if not config.layers:
        errors.append("layer chain is empty")
        return errors
    channels = config.input_channels
    downs = ups = 0
    for i, layer in enumerate(config.layers):
        if layer.kind not in LAYER_KINDS:
            errors.append(f"layer {i}: unknown kind {layer.kind!r}")
            continue
        if layer.kind == "sepconv_relu":
            if layer.channels_out is None or layer.channels_out < 1:
                errors.append(f"layer {i}: channels_out must be >= 1")
            else:
                channels = layer.channels_out
            if layer.kernel_size < 1 or layer.kernel_size % 2 == 0:
                errors.append(f"layer {i}: kernel_size must be odd, got {layer.kernel_size}")
            if layer.stride not in (1, 2):
                errors.append(f"layer {i}: stride must be 1 or 2, got {layer.stride}")
            if layer.stride == 2:
                downs += 1
                if config.downsample_mode == "maxpool":
                    errors.append(f"layer {i}: stride-2 sepconv in maxpool downsample mode")
        elif layer.kind == "maxpool":
            downs += 1
            if config.downsample_mode == "strided_conv":
                errors.append(f"layer {i}: maxpool layer in strided_conv downsample mode")
        elif layer.kind == "upsample":
            ups += 1
        elif layer.kind == "softmax" and i != len(config.layers) - 1:
            errors.append(f"layer {i}: softmax must be the final layer")
    if downs != ups:
        errors.append(f"resolution factor is not 1: {downs} downsamples vs {ups} upsamples")
    if config.layers[-1].kind != "softmax":
        errors.append("final layer must be softmax")
    elif channels != config.class_count:
        errors.append(f"softmax receives {channels} channels but class_count is {config.class_count}")
    return errors


def check_config(config: ModelConfig) -> None:
    errors = validate(config)
    if errors:
        raise ConfigError("; ".join(errors))


@dataclass
class Model:
    """A config plus one parameter dict per layer (``None`` for parameter-free layers)."""

    config: ModelConfig
    params: list = field(default_factory=list)

    def conv_params(self, i: int) -> tuple[ConvParams, ConvParams]:
        spec, p = self.config.layers[i], self.params[i]
        dw = ConvParams(p["dw_weight"], None, spec.stride, "same")
        pw = ConvParams(p["pw_weight"], p["pw_bias"], 1, "same")
        return dw, pw

    def bn_params(self, i: int) -> BatchNormParams:
        p = self.params[i]
        return BatchNormParams(p["gamma"], p["beta"], p["running_mean"], p["running_var"])

    def trainable(self):
        """Yield ``(layer_index, name, array)`` for every trained parameter."""
        for i, (spec, p) in enumerate(zip(self.config.layers, self.params)):
            if spec.kind == "sepconv_relu":
                names = SEPCONV_PARAMS
            elif spec.kind == "batchnorm":
                names = BN_TRAINABLE
            else:
                continue
            for name in names:
                yield i, name, p[name]

    def param_count(self) -> int:
        return sum(a.size for _, _, a in self.trainable())

    def astype(self, dtype) -> "Model":
        params = [None if p is None else {k: v.astype(dtype) for k, v in p.items()} for p in self.params]
        return Model(self.config, params)

    def copy(self) -> "Model":
        return self.astype(self.params_dtype)

    @property
    def params_dtype(self):
        for p in self.params:
            if p is not None:
                return next(iter(p.values())).dtype
        return np.dtype(DTYPE)


def _param_shapes(config: ModelConfig) -> list:
    shapes = []
    channels = config.input_channels
    for spec in config.layers:
        if spec.kind == "sepconv_relu":
            k, o = spec.kernel_size, spec.channels_out
            shapes.append({"dw_weight": (channels, 1, k, k), "pw_weight": (o, channels, 1, 1),
                           "pw_bias": (o,)})
            channels = o
        elif spec.kind == "batchnorm":
            shapes.append({name: (channels,) for name in BN_PARAMS})
        else:
            shapes.append(None)
    return shapes


def init_model(config: ModelConfig, seed: int = 0) -> Model:
    """Uniform weights in +-sqrt(6 / fan_in), zero biases, identity batchnorm."""
    check_config(config)
    rng = np.random.default_rng(seed)
    params = []
    for shapes in _param_shapes(config):
        if shapes is None:
            params.append(None)
        elif "dw_weight" in shapes:
            p = {}
            for name in ("dw_weight", "pw_weight"):
                shape = shapes[name]
                fan_in = shape[1] * shape[2] * shape[3]
                bound = np.sqrt(6.0 / fan_in)
                p[name] = rng.uniform(-bound, bound, shape).astype(DTYPE)
            p["pw_bias"] = np.zeros(shapes["pw_bias"], DTYPE)
            params.append(p)
        else:
            c = shapes["gamma"][0]
            bn = BatchNormParams.identity(c, DTYPE)
            params.append({name: getattr(bn, name) for name in BN_PARAMS})
    return Model(config, params)


# -- forward / backward -----------------------------------------------------

@dataclass
class Trace:
    """Per-layer caches and batchnorm inputs from a cached forward pass."""

    caches: list
    bn_inputs: dict


def _check_input(model: Model, x):
    x = check_tensor(x, "image")
    cfg = model.config
    if x.shape[1] != cfg.input_channels:
        raise ShapeError(f"image has {x.shape[1]} channels, model expects {cfg.input_channels}")
    d = cfg.divisor
    if x.shape[2] % d or x.shape[3] % d:
        raise ShapeError(
            f"image size {x.shape[2]}x{x.shape[3]} must be divisible by {d} "
            f"({cfg.downsample_count} downsampling stages)")
    return x


def forward_cached(model: Model, x, mode: str = "train", upto_logits: bool = False):
    """Run the chain keeping caches for :func:`backward_model`.

    Returns ``(output, trace)``; ``output`` is the pre-softmax logits when
    ``upto_logits`` is set, probabilities otherwise.
    """
    x = _check_input(model, x)
    caches, bn_inputs = [], {}
    layers = model.config.layers
    for i, spec in enumerate(layers):
        if spec.kind == "sepconv_relu":
            x, c1 = ops.forward("separable", x, model.conv_params(i))
            x, c2 = ops.forward("relu", x)
            caches.append((c1, c2))
        elif spec.kind == "batchnorm":
            bn_inputs[i] = x
            x, c = ops.forward("batchnorm", x, model.bn_params(i), mode)
            caches.append(c)
        elif spec.kind == "softmax" and upto_logits:
            caches.append(None)
        else:
            x, c = ops.forward(spec.kind, x)
            caches.append(c)
    return x, Trace(caches, bn_inputs)


def forward(model: Model, image, mode: str = "infer"):
    """Per-pixel class probabilities with the same spatial size as ``image``."""
    return forward_cached(model, image, mode)[0]


def backward_model(model: Model, trace: Trace, grad_logits) -> list:
    """Parameter gradients given the gradient with respect to the softmax input.

    Returns a list aligned with ``model.params``: a dict of gradients for
    each trainable layer, ``None`` elsewhere.
    """
    layers = model.config.layers
    grads: list = [None] * len(layers)
    g = grad_logits
    for i in range(len(layers) - 1, -1, -1):
        spec, cache = layers[i], trace.caches[i]
        if spec.kind == "softmax":
            continue
        if spec.kind == "sepconv_relu":
            c1, c2 = cache
            g, _ = ops.backward("relu", c2, g)
            g, gp = ops.backward("separable", c1, g)
            grads[i] = {"dw_weight": gp["depthwise"]["weights"],
                        "pw_weight": gp["pointwise"]["weights"],
                        "pw_bias": gp["pointwise"]["bias"]}
        elif spec.kind == "batchnorm":
            g, grads[i] = ops.backward("batchnorm", cache, g)
        else:
            g, _ = ops.backward(spec.kind, cache, g)
    return grads


def update_running_stats(model: Model, trace: Trace) -> Model:
    """New model whose batchnorm running statistics absorb the traced batch."""
    params = list(model.params)
    for i, x in trace.bn_inputs.items():
        bn = ops.update_running_stats(model.bn_params(i), x)
        params[i] = {**params[i], "running_mean": bn.running_mean, "running_var": bn.running_var}
    return replace(model, params=params)


def predict_labels(probs) -> np.ndarray:
    """Per-pixel argmax; ties go to the lowest class index."""
    probs = np.asarray(probs)
    if probs.ndim != 4 or probs.shape[0] != 1:
        raise ShapeError(f"predict_labels expects a batch of one, got shape {probs.shape}")
    return np.argmax(probs[0], axis=0).astype(LABEL_DTYPE)


def predict_batch(probs) -> list[np.ndarray]:
    return [predict_labels(probs[i:i + 1]) for i in range(np.asarray(probs).shape[0])]


# -- model files --------------------------------------------------------------

def _param_order(config: ModelConfig):
    for i, spec in enumerate(config.layers):
        if spec.kind == "sepconv_relu":
            for name in SEPCONV_PARAMS:
                yield i, name
        elif spec.kind == "batchnorm":
            for name in BN_PARAMS:
                yield i, name


def dumps_model(model: Model) -> bytes:
    buf = io.BytesIO()
    text = model.config.to_text().encode("utf-8")
    buf.write(MAGIC + bytes([FORMAT_VERSION]))
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    for i, name in _param_order(model.config):
        arr = np.ascontiguousarray(model.params[i][name], dtype="<f4")
        buf.write(struct.pack("<I", arr.size))
        buf.write(arr.tobytes())
    return buf.getvalue()


def loads_model(data: bytes) -> Model:
    view = memoryview(data)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"truncated model file while reading {what}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(len(MAGIC), "magic")) != MAGIC:
        raise FormatError("not a model file (bad magic)")
    version = take(1, "version")[0]
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported model format version {version}")
    (n,) = struct.unpack("<I", take(4, "config length"))
    try:
        text = bytes(take(n, "config")).decode("utf-8")
        config = parse_config(text)
        check_config(config)
    except (UnicodeDecodeError, ConfigError) as exc:
        raise FormatError(f"invalid embedded config: {exc}") from None
    shapes = _param_shapes(config)
    params = [None if s is None else {} for s in shapes]
    for i, name in _param_order(config):
        shape = shapes[i][name]
        (count,) = struct.unpack("<I", take(4, f"layer {i} {name} count"))
        if count != int(np.prod(shape)):
            raise FormatError(f"layer {i} {name}: file has {count} values, config needs {int(np.prod(shape))}")
        raw = take(4 * count, f"layer {i} {name}")
        params[i][name] = np.frombuffer(raw, dtype="<f4").astype(DTYPE).reshape(shape)
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} unexpected trailing bytes in model file")
    return Model(config, params)


def save_model(model: Model, path) -> None:
    Path(path).write_bytes(dumps_model(model))


def load_model(path) -> Model:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read model {path}: {exc.strerror}") from None
    return loads_model(data)
