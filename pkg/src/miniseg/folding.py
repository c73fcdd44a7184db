"""Inference-graph optimization: absorb batch norms into adjacent convolutions.

A stage's batch norm at inference is the per-channel affine
a*x + b with a = gamma / sqrt(var + eps) and b = beta - a * mean. Because the
scale a is positive for any sanely trained net, it commutes with the ReLU and
max pool between the conv and the norm, so it can be folded into the conv's
pointwise rows while b survives as a per-channel bias applied where the norm
used to act. The input norm sits before the first conv instead: its scale is
absorbed into the first depthwise kernels and its shift becomes a constant
added to the input image (exact everywhere, including the zero-padded
borders, because the padding is applied after the offset in both forms).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import StateError
from .layers import ConvParams, KERNEL
from .network import Model, StageSpec, stage_stride
from .tensors import conv_output_size


def _bn_affine(bn):
    scale = bn.gamma / np.sqrt(bn.running_var + bn.epsilon)
    shift = bn.beta - scale * bn.running_mean
    return scale, shift


def fold_batchnorm(model: Model) -> Model:
    """Return an equivalent model with every batch norm folded away.

    Folding a model that is already folded is a no-op (a plain copy).
    """
    for bn in [model.input_norm] + [s.bn for s in model.stages]:
        if bn is not None and not (
            np.all(np.isfinite(bn.running_mean)) and np.all(np.isfinite(bn.running_var))
        ):
            raise StateError("running statistics are not finite; model was never run in train mode?")

    input_offset = None if model.input_offset is None else model.input_offset.copy()
    input_scale = None
    if model.input_norm is not None:
        scale, shift = _bn_affine(model.input_norm)
        if np.any(scale == 0):
            raise StateError("input norm has a zero scale channel; cannot fold")
        input_scale = scale
        input_offset = (shift / scale).astype(scale.dtype)

    stages = []
    for i, stage in enumerate(model.stages):
        depthwise = stage.conv.depthwise.copy()
        pointwise = stage.conv.pointwise.copy()
        bias = None if stage.bias is None else stage.bias.copy()
        if i == 0 and input_scale is not None:
            depthwise *= input_scale[:, None, None]
        if stage.bn is not None:
            scale, shift = _bn_affine(stage.bn)
            if np.any(scale <= 0):
                raise StateError(
                    f"stage {i} has a non-positive norm scale; it cannot cross ReLU/pool"
                )
            pointwise = pointwise * scale[:, None]
            bias = shift
        stages.append(
            StageSpec(
                kind=stage.kind,
                conv=ConvParams(depthwise, pointwise),
                bn=None,
                pool=stage.pool,
                upsample=stage.upsample,
                bias=bias,
            )
        )
    return Model(
        config=model.config,
        input_norm=None,
        stages=stages,
        precision=model.precision,
        folded=True,
        input_offset=input_offset,
    )


@dataclass(frozen=True)
class StageOpCount:
    label: str
    conv_macs: int
    norm_macs: int

    @property
    def total(self) -> int:
        return self.conv_macs + self.norm_macs


@dataclass(frozen=True)
class OpCountReport:
    per_stage: tuple[StageOpCount, ...]

    @property
    def total(self) -> int:
        return sum(s.total for s in self.per_stage)


def count_ops(model: Model, input_hw: tuple[int, int]) -> OpCountReport:
    """Deterministic multiply-add totals for one forward pass at a resolution.

    Convolutions count one multiply-add per kernel tap; an inference batch norm
    counts one per element (precomputed scale and shift). Pure adds (folded
    biases, the folded input offset) and max/copy traffic count zero.
    """
    h, w = input_hw
    entries = []
    if model.input_norm is not None:
        entries.append(StageOpCount("input_norm", 0, 3 * h * w))
    elif model.input_offset is not None:
        entries.append(StageOpCount("input_offset", 0, 0))
    for i, stage in enumerate(model.stages):
        if stage.upsample > 1:
            h, w = h * stage.upsample, w * stage.upsample
        stride = stage_stride(model, stage)
        oh, ow = conv_output_size(h, stride), conv_output_size(w, stride)
        in_ch, out_ch = stage.conv.in_channels, stage.conv.out_channels
        conv_macs = in_ch * KERNEL * KERNEL * oh * ow + out_ch * in_ch * oh * ow
        h, w = oh, ow
        if stage.pool:
            h, w = h // 2, w // 2
        norm_macs = out_ch * h * w if stage.bn is not None else 0
        entries.append(StageOpCount(f"{stage.kind}{i}", conv_macs, norm_macs))
    return OpCountReport(tuple(entries))


__all__ = ["fold_batchnorm", "count_ops", "OpCountReport", "StageOpCount"]
