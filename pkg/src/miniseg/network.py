"""The L/F/M/S family of encoder-decoder segmentation networks.

A network is identified by:
  L  number of encoder (and decoder) stages, in {3, 4}
  F  filters in the first encoder stage, in {3, 4, 5}
  M  per-stage filter multiplier, in {1.25, 1.5, 2}
  S  convolution stride of the encoder stages, in {1, 2}
  C  output classes (>= 2; class 0 is background)

Execution order: input batch norm, then L encoder stages
(sepconv stride S + ReLU, 2x2 maxpool on all but the last, batch norm),
then L decoder stages (nearest upsample, sepconv stride 1 + ReLU, batch norm
on all but the last), then a pixelwise softmax. Decoder stage 1 upsamples by
S, later decoder stages by 2*S, which exactly undoes the encoder so the
output has the input's spatial size at any compatible resolution.
"""

from __future__ import annotations

import math
import re
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .layers import (
    BatchNormParams,
    ConvParams,
    KERNEL,
    batchnorm_backward,
    batchnorm_forward,
    _depthwise_forward,
    _pointwise_forward,
    maxpool_backward,
    maxpool_forward,
    relu_backward,
    separable_conv_backward,
    softmax_pixelwise_forward,
    upsample_nearest_backward,
    upsample_nearest_forward,
)
from .tensors import DTYPES, precision_of

IN_CHANNELS = 3
GRID_LAYERS = (3, 4)
GRID_FILTERS = (3, 4, 5)
GRID_MULTIPLIERS = (1.25, 1.5, 2.0)
GRID_STRIDES = (1, 2)

BN_MOMENTUM = 0.9
BN_EPSILON = 1e-5

MAGIC = b"SMKR"
FORMAT_VERSION = 1
_FLAG_DOUBLE = 0x01
_FLAG_FOLDED = 0x02
_KIND_INPUT_NORM = 0
_KIND_ENCODER = 1
_KIND_DECODER = 2
_KIND_INPUT_OFFSET = 3

_CONFIG_RE = re.compile(r"^L(\d+)F(\d+)M([0-9.]+)S(\d+)(?:C(\d+))?$")


def _format_multiplier(m: float) -> str:
    return f"{m:g}"


@dataclass(frozen=True)
class NetworkConfig:
    """One member of the architecture family."""

    layers: int
    filters: int
    multiplier: float
    stride: int
    classes: int = 2

    @property
    def name(self) -> str:
        return f"L{self.layers}F{self.filters}M{_format_multiplier(self.multiplier)}S{self.stride}"

    @staticmethod
    def parse(text: str, classes: int = 2) -> "NetworkConfig":
        m = _CONFIG_RE.match(text.strip())
        if not m:
            raise ConfigError(f"cannot parse config string {text!r} (expected e.g. L3F4M1.5S2)")
        c = int(m.group(5)) if m.group(5) else classes
        return NetworkConfig(int(m.group(1)), int(m.group(2)), float(m.group(3)), int(m.group(4)), c)


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def feature_widths(filters: int, multiplier: float, layers: int) -> list[int]:
    """Channel widths of the encoder stages: F, then iterated round-half-up of width*M."""
    widths = [filters]
    for _ in range(layers - 1):
        widths.append(round_half_up(widths[-1] * multiplier))
    return widths


def total_downsample(cfg: NetworkConfig) -> int:
    """Combined spatial reduction factor of the encoder: S^L * 2^(L-1)."""
    return cfg.stride**cfg.layers * 2 ** (cfg.layers - 1)


def config_violations(cfg: NetworkConfig, input_hw: tuple[int, int] | None = None) -> list[str]:
    """Structured validation; returns one message per failing rule."""
    problems = []
    if cfg.layers < 1:
        problems.append(f"layers must be >= 1, got {cfg.layers}")
    if cfg.filters < 1:
        problems.append(f"filters must be >= 1, got {cfg.filters}")
    if cfg.multiplier <= 0:
        problems.append(f"multiplier must be positive, got {cfg.multiplier}")
    if cfg.stride not in (1, 2):
        problems.append(f"stride must be 1 or 2, got {cfg.stride}")
    if cfg.classes < 2:
        problems.append(f"classes must be >= 2, got {cfg.classes}")
    if cfg.layers == 4 and cfg.stride == 2:
        problems.append("invalid L/S combination: L=4 with S=2 produces invalid feature map sizes")
    if input_hw is not None and not problems:
        factor = total_downsample(cfg)
        h, w = input_hw
        if h % factor:
            problems.append(f"input height {h} is not a multiple of {factor}")
        if w % factor:
            problems.append(f"input width {w} is not a multiple of {factor}")
    return problems


def validate_config(cfg: NetworkConfig, input_hw: tuple[int, int] | None = None) -> None:
    problems = config_violations(cfg, input_hw)
    if problems:
        raise ConfigError(f"{cfg.name}: " + "; ".join(problems))


def enumerate_configs(
    layers=GRID_LAYERS,
    filters=GRID_FILTERS,
    multipliers=GRID_MULTIPLIERS,
    strides=GRID_STRIDES,
    classes: int = 2,
) -> list[NetworkConfig]:
    """Cartesian product of the grid minus invalid (L, S) combinations,
    ordered by (L, F, M, S) ascending."""
    configs = []
    for layer_count in sorted(layers):
        for filter_count in sorted(filters):
            for multiplier in sorted(multipliers):
                for stride in sorted(strides):
                    cfg = NetworkConfig(layer_count, filter_count, float(multiplier), stride, classes)
                    if not config_violations(cfg):
                        configs.append(cfg)
    return configs


@dataclass
class StageSpec:
    """One encoder or decoder stage.

    `upsample` is the nearest-neighbor factor applied before the conv
    (0 for encoders, 1 means none). `bias` is the per-channel shift a folded
    batch norm leaves behind; it is applied where the batch norm used to act.
    """

    kind: str
    conv: ConvParams
    bn: BatchNormParams | None
    pool: bool = False
    upsample: int = 0
    bias: np.ndarray | None = None


@dataclass
class Model:
    config: NetworkConfig
    input_norm: BatchNormParams | None
    stages: list[StageSpec]
    precision: str = "single"
    folded: bool = False
    input_offset: np.ndarray | None = None

    @property
    def bn_momentum(self) -> float:
        if self.input_norm is not None:
            return self.input_norm.momentum
        for stage in self.stages:
            if stage.bn is not None:
                return stage.bn.momentum
        return BN_MOMENTUM

    @property
    def bn_epsilon(self) -> float:
        if self.input_norm is not None:
            return self.input_norm.epsilon
        for stage in self.stages:
            if stage.bn is not None:
                return stage.bn.epsilon
        return BN_EPSILON


def _fresh_bn(channels: int, dtype, momentum=BN_MOMENTUM, epsilon=BN_EPSILON) -> BatchNormParams:
    return BatchNormParams(
        gamma=np.ones(channels, dtype=dtype),
        beta=np.zeros(channels, dtype=dtype),
        running_mean=np.zeros(channels, dtype=dtype),
        running_var=np.ones(channels, dtype=dtype),
        epsilon=epsilon,
        momentum=momentum,
    )


def _init_conv(rng: np.random.Generator, in_ch: int, out_ch: int, dtype) -> ConvParams:
    depthwise = rng.normal(0.0, math.sqrt(2.0 / (KERNEL * KERNEL)), (in_ch, KERNEL, KERNEL))
    pointwise = rng.normal(0.0, math.sqrt(2.0 / in_ch), (out_ch, in_ch))
    return ConvParams(depthwise.astype(dtype), pointwise.astype(dtype))


def build_model(cfg: NetworkConfig, seed: int = 0, precision: str = "single") -> Model:
    """Instantiate a network with seeded He-scaled weights and fresh batch norms."""
    validate_config(cfg)
    dtype = DTYPES[precision]
    rng = np.random.default_rng(seed)
    widths = feature_widths(cfg.filters, cfg.multiplier, cfg.layers)
    stages: list[StageSpec] = []
    in_ch = IN_CHANNELS
    for i, width in enumerate(widths):
        stages.append(
            StageSpec(
                kind="encoder",
                conv=_init_conv(rng, in_ch, width, dtype),
                bn=_fresh_bn(width, dtype),
                pool=i < cfg.layers - 1,
            )
        )
        in_ch = width
    for j in range(1, cfg.layers + 1):
        out_ch = widths[cfg.layers - 1 - j] if j < cfg.layers else cfg.classes
        stages.append(
            StageSpec(
                kind="decoder",
                conv=_init_conv(rng, in_ch, out_ch, dtype),
                bn=_fresh_bn(out_ch, dtype) if j < cfg.layers else None,
                upsample=cfg.stride if j == 1 else 2 * cfg.stride,
            )
        )
        in_ch = out_ch
    return Model(cfg, _fresh_bn(IN_CHANNELS, dtype), stages, precision)


def stage_stride(model: Model, stage: StageSpec) -> int:
    return model.config.stride if stage.kind == "encoder" else 1


@dataclass
class StageCache:
    conv_input: np.ndarray
    depthwise_out: np.ndarray
    pre_relu: np.ndarray
    pool_indices: np.ndarray | None
    bn_cache: object


def _check_input(model: Model, x: np.ndarray) -> np.ndarray:
    if x.ndim != 4 or x.shape[1] != IN_CHANNELS:
        raise ShapeError(f"input must be (batch, {IN_CHANNELS}, H, W), got {x.shape}")
    validate_config(model.config, (x.shape[2], x.shape[3]))
    dtype = DTYPES[model.precision]
    return x if x.dtype == dtype else x.astype(dtype)


def _run_stages(model: Model, x: np.ndarray, train: bool, collect: bool):
    input_cache = None
    if model.input_norm is not None:
        x, input_cache = batchnorm_forward(x, model.input_norm, train)
    elif model.input_offset is not None:
        x = x + model.input_offset[None, :, None, None]
    caches: list[StageCache] = []
    last = len(model.stages) - 1
    for i, stage in enumerate(model.stages):
        if stage.upsample > 1:
            x = upsample_nearest_forward(x, stage.upsample)
        conv_in = x
        z = _depthwise_forward(x, stage.conv.depthwise, stage_stride(model, stage))
        a = _pointwise_forward(z, stage.conv.pointwise)
        h = np.maximum(a, 0) if i != last else a
        pool_idx = None
        if stage.pool:
            h, pool_idx = maxpool_forward(h)
        bn_cache = None
        if stage.bn is not None:
            h, bn_cache = batchnorm_forward(h, stage.bn, train)
        if stage.bias is not None:
            h = h + stage.bias[None, :, None, None]
        if collect:
            caches.append(StageCache(conv_in, z, a, pool_idx, bn_cache))
        x = h
    return softmax_pixelwise_forward(x), input_cache, caches


def forward(model: Model, image: np.ndarray) -> np.ndarray:
    """Inference forward pass: (batch, 3, H, W) -> per-pixel class probabilities."""
    x = _check_input(model, image)
    probs, _, _ = _run_stages(model, x, train=False, collect=False)
    return probs


def forward_with_cache(model: Model, image: np.ndarray, train: bool = True):
    """Forward pass keeping per-stage activations for a subsequent backward()."""
    x = _check_input(model, image)
    probs, input_cache, caches = _run_stages(model, x, train=train, collect=True)
    return probs, (input_cache, caches)


def backward(model: Model, caches, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Backpropagate from the pre-softmax logits gradient to every parameter."""
    if model.folded:
        raise ShapeError("folded models cannot be trained")
    input_cache, stage_caches = caches
    grads: dict[str, np.ndarray] = {}
    dh = dlogits
    last = len(model.stages) - 1
    for i in range(last, -1, -1):
        stage = model.stages[i]
        cache = stage_caches[i]
        if stage.bn is not None:
            dh, dgamma, dbeta = batchnorm_backward(cache.bn_cache, stage.bn, dh)
            grads[f"stage{i}.bn.gamma"] = dgamma
            grads[f"stage{i}.bn.beta"] = dbeta
        if stage.pool:
            dh = maxpool_backward(cache.pool_indices, dh)
        if i != last:
            dh = relu_backward(cache.pre_relu, dh)
        dh, d_dw, d_pw = separable_conv_backward(
            cache.conv_input, stage.conv, stage_stride(model, stage), dh, cache.depthwise_out
        )
        grads[f"stage{i}.conv.depthwise"] = d_dw
        grads[f"stage{i}.conv.pointwise"] = d_pw
        if stage.upsample > 1:
            dh = upsample_nearest_backward(dh, stage.upsample)
    if model.input_norm is not None:
        _, dgamma, dbeta = batchnorm_backward(input_cache, model.input_norm, dh)
        grads["input_norm.gamma"] = dgamma
        grads["input_norm.beta"] = dbeta
    return grads


def parameters(model: Model) -> list[tuple[str, np.ndarray]]:
    """Learnable arrays in a stable order, keyed like backward()'s gradients."""
    params = []
    if model.input_norm is not None:
        params.append(("input_norm.gamma", model.input_norm.gamma))
        params.append(("input_norm.beta", model.input_norm.beta))
    for i, stage in enumerate(model.stages):
        params.append((f"stage{i}.conv.depthwise", stage.conv.depthwise))
        params.append((f"stage{i}.conv.pointwise", stage.conv.pointwise))
        if stage.bn is not None:
            params.append((f"stage{i}.bn.gamma", stage.bn.gamma))
            params.append((f"stage{i}.bn.beta", stage.bn.beta))
    return params


def parameter_count(model: Model) -> int:
    return sum(int(p.size) for _, p in parameters(model))


def _arrays_of(model: Model) -> list[np.ndarray]:
    arrays = []
    if model.input_norm is not None:
        p = model.input_norm
        arrays += [p.gamma, p.beta, p.running_mean, p.running_var]
    if model.input_offset is not None:
        arrays.append(model.input_offset)
    for stage in model.stages:
        arrays += [stage.conv.depthwise, stage.conv.pointwise]
        if stage.bias is not None:
            arrays.append(stage.bias)
        if stage.bn is not None:
            arrays += [stage.bn.gamma, stage.bn.beta, stage.bn.running_mean, stage.bn.running_var]
    return arrays


def models_equal(a: Model, b: Model) -> bool:
    """Bitwise structural equality of config, flags, and every parameter array."""
    if (
        a.config != b.config
        or a.precision != b.precision
        or a.folded != b.folded
        or (a.input_norm is None) != (b.input_norm is None)
        or (a.input_offset is None) != (b.input_offset is None)
        or len(a.stages) != len(b.stages)
        or a.bn_momentum != b.bn_momentum
        or a.bn_epsilon != b.bn_epsilon
    ):
        return False
    for sa, sb in zip(a.stages, b.stages):
        if (
            sa.kind != sb.kind
            or sa.pool != sb.pool
            or sa.upsample != sb.upsample
            or (sa.bn is None) != (sb.bn is None)
            or (sa.bias is None) != (sb.bias is None)
        ):
            return False
    arrays_a, arrays_b = _arrays_of(a), _arrays_of(b)
    return all(np.array_equal(x, y) for x, y in zip(arrays_a, arrays_b))


# --- model file format -------------------------------------------------------
#
# Little-endian. Header:
#   magic "SMKR" | version u32 | flags u8 (bit0 double precision, bit1 folded)
#   classes u8 | layers u8 | filters u8 | stride u8 | multiplier f64
#   bn momentum f64 | bn epsilon f64
# Then one blob per executed block, in execution order. Blob header:
#   kind u8 (0 input-norm, 1 encoder, 2 decoder, 3 input-offset)
#   in u16 | out u16 | pool u8 | upsample u8 | has_bn u8
# followed by the raw parameter arrays in declaration order:
#   input-norm:    gamma, beta, running_mean, running_var
#   input-offset:  offset
#   conv stages:   depthwise, pointwise, then (unfolded) gamma, beta,
#                  running_mean, running_var, or (folded) bias, each present
#                  only when has_bn is 1.

_HEADER = struct.Struct("<4sIBBBBBddd")
_BLOB = struct.Struct("<BHHBBB")


def save_model(model: Model, path) -> None:
    dtype = DTYPES[model.precision]
    flags = (_FLAG_DOUBLE if model.precision == "double" else 0) | (
        _FLAG_FOLDED if model.folded else 0
    )
    cfg = model.config
    out = bytearray()
    out += _HEADER.pack(
        MAGIC,
        FORMAT_VERSION,
        flags,
        cfg.classes,
        cfg.layers,
        cfg.filters,
        cfg.stride,
        cfg.multiplier,
        model.bn_momentum,
        model.bn_epsilon,
    )

    def emit(array: np.ndarray):
        out.extend(np.ascontiguousarray(array, dtype=dtype).tobytes())

    if model.input_norm is not None:
        p = model.input_norm
        out += _BLOB.pack(_KIND_INPUT_NORM, IN_CHANNELS, IN_CHANNELS, 0, 0, 1)
        for a in (p.gamma, p.beta, p.running_mean, p.running_var):
            emit(a)
    elif model.input_offset is not None:
        out += _BLOB.pack(_KIND_INPUT_OFFSET, IN_CHANNELS, IN_CHANNELS, 0, 0, 0)
        emit(model.input_offset)
    for stage in model.stages:
        kind = _KIND_ENCODER if stage.kind == "encoder" else _KIND_DECODER
        has_bn = 1 if (stage.bn is not None or stage.bias is not None) else 0
        out += _BLOB.pack(
            kind,
            stage.conv.in_channels,
            stage.conv.out_channels,
            1 if stage.pool else 0,
            stage.upsample,
            has_bn,
        )
        emit(stage.conv.depthwise)
        emit(stage.conv.pointwise)
        if model.folded:
            if stage.bias is not None:
                emit(stage.bias)
        elif stage.bn is not None:
            for a in (stage.bn.gamma, stage.bn.beta, stage.bn.running_mean, stage.bn.running_var):
                emit(a)
    with open(path, "wb") as fh:
        fh.write(bytes(out))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise FormatError(
                f"{self.path}: truncated model file at byte {self.offset} "
                f"(needed {n} more bytes, {len(self.data) - self.offset} available)"
            )
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def array(self, count: int, dtype) -> np.ndarray:
        raw = self.take(count * dtype().itemsize)
        return np.frombuffer(raw, dtype=dtype).copy()


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        reader = _Reader(fh.read(), path)
    magic, version, flags, classes, layers, filters, stride, multiplier, momentum, epsilon = (
        _HEADER.unpack(reader.take(_HEADER.size))
    )
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0 (expected {MAGIC!r})")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    if flags & ~(_FLAG_DOUBLE | _FLAG_FOLDED):
        raise FormatError(f"{path}: unknown flag bits 0x{flags:02x}")
    precision = "double" if flags & _FLAG_DOUBLE else "single"
    folded = bool(flags & _FLAG_FOLDED)
    dtype = DTYPES[precision]
    cfg = NetworkConfig(layers, filters, multiplier, stride, classes)
    validate_config(cfg)

    def read_blob():
        at = reader.offset
        kind, in_ch, out_ch, pool, upsample, has_bn = _BLOB.unpack(reader.take(_BLOB.size))
        return at, kind, in_ch, out_ch, bool(pool), upsample, bool(has_bn)

    input_norm = None
    input_offset = None
    at, kind, in_ch, out_ch, pool, upsample, has_bn = read_blob()
    if folded:
        if kind != _KIND_INPUT_OFFSET:
            raise FormatError(f"{path}: expected input-offset blob at byte {at}, got kind {kind}")
        input_offset = reader.array(IN_CHANNELS, dtype)
    else:
        if kind != _KIND_INPUT_NORM:
            raise FormatError(f"{path}: expected input-norm blob at byte {at}, got kind {kind}")
        arrays = [reader.array(IN_CHANNELS, dtype) for _ in range(4)]
        input_norm = BatchNormParams(*arrays, epsilon=epsilon, momentum=momentum)

    stages: list[StageSpec] = []
    for _ in range(2 * layers):
        at, kind, in_ch, out_ch, pool, upsample, has_bn = read_blob()
        if kind not in (_KIND_ENCODER, _KIND_DECODER):
            raise FormatError(f"{path}: unexpected blob kind {kind} at byte {at}")
        depthwise = reader.array(in_ch * KERNEL * KERNEL, dtype).reshape(in_ch, KERNEL, KERNEL)
        pointwise = reader.array(out_ch * in_ch, dtype).reshape(out_ch, in_ch)
        bn = None
        bias = None
        if has_bn:
            if folded:
                bias = reader.array(out_ch, dtype)
            else:
                arrays = [reader.array(out_ch, dtype) for _ in range(4)]
                bn = BatchNormParams(*arrays, epsilon=epsilon, momentum=momentum)
        stages.append(
            StageSpec(
                kind="encoder" if kind == _KIND_ENCODER else "decoder",
                conv=ConvParams(depthwise, pointwise),
                bn=bn,
                pool=pool,
                upsample=upsample,
                bias=bias,
            )
        )
    if reader.offset != len(reader.data):
        raise FormatError(
            f"{path}: {len(reader.data) - reader.offset} trailing bytes at byte {reader.offset}"
        )
    return Model(cfg, input_norm, stages, precision, folded=folded, input_offset=input_offset)
