"""Feature-learning blocks: plain conv, residual, and SE-residual, plus skip merging.

Every block keeps one two-conv feature path (3x3x3 kernels, activation between
the convs). The residual variants add the block input back before the final
activation; the SE variant first rescales each channel of the feature path by
a learned gate in (0, 1): global average pool, a two-layer bottleneck, and a
sigmoid.

Blocks whose first conv changes width or strides down carry a 1x1x1 projection
on the identity path so the residual sum stays well-formed; with equal widths
and stride 1 the projection is absent and the sum uses the raw input.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from .tensor import (
    Tensor,
    concat_channels,
    conv3d,
    conv_transpose3d,
    dense,
    global_avg_pool3d,
    leaky_relu,
    scale_channels,
    sigmoid,
)

__all__ = [
    "Conv3",
    "Dense",
    "UpConv",
    "PlainBlock",
    "ResidualBlock",
    "SEResBlock",
    "MergeMode",
    "SkipMerge",
    "make_block",
]


def _uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


class Conv3:
    """Conv layer with uniform 1/sqrt(fan_in) weights and zero bias."""

    def __init__(self, rng, cin: int, cout: int, kernel: int = 3, stride: int = 1,
                 padding: int | None = None):
        k = int(kernel)
        self.stride = int(stride)
        self.padding = k // 2 if padding is None else int(padding)
        self.weight = _uniform_fan_in(rng, (cout, cin, k, k, k), cin * k**3)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


class UpConv:
    """Transposed conv (2x2x2 kernel, stride 2 by default) for up-sampling."""

    def __init__(self, rng, cin: int, cout: int, kernel: int = 2, stride: int = 2):
        k = int(kernel)
        self.stride = int(stride)
        self.weight = _uniform_fan_in(rng, (cin, cout, k, k, k), cin * k**3)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv_transpose3d(x, self.weight, self.bias, stride=self.stride, padding=0)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


class Dense:
    def __init__(self, rng, din: int, dout: int):
        self.weight = _uniform_fan_in(rng, (dout, din), din)
        self.bias = Tensor(np.zeros(dout), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return dense(x, self.weight, self.bias)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


class _BlockBase:
    """Two-conv feature path shared by all block kinds.

    Draw order is fixed (conv1, conv2, then subclass extras, then the
    projection) so a seed pins every parameter bit-exactly.
    """

    def __init__(self, rng, cin: int, cout: int, stride: int = 1, slope: float = 0.01):
        self.cin, self.cout, self.stride, self.slope = cin, cout, stride, slope
        self.conv1 = Conv3(rng, cin, cout, 3, stride=stride)
        self.conv2 = Conv3(rng, cout, cout, 3)
        self._extra(rng)
        if cin != cout or stride != 1:
            self.proj = Conv3(rng, cin, cout, 1, stride=stride, padding=0)
        else:
            self.proj = None

    def _extra(self, rng):
        pass

    def _feature_path(self, x: Tensor) -> Tensor:
        return self.conv2(leaky_relu(self.conv1(x), self.slope))

    def _skip(self, x: Tensor) -> Tensor:
        return self.proj(x) if self.proj is not None else x

    def _check(self, x: Tensor):
        if x.ndim != 5 or x.shape[1] != self.cin:
            raise ValueError(
                f"{type(self).__name__}: expected {self.cin} input channels, got {x.shape}"
            )

    def _named(self):
        yield "conv1", self.conv1
        yield "conv2", self.conv2
        if self.proj is not None:
            yield "proj", self.proj

    def parameters(self):
        out = []
        for lname, layer in self._named():
            out.extend((f"{lname}.{pname}", p) for pname, p in layer.parameters())
        return out


class PlainBlock(_BlockBase):
    """conv -> act -> conv -> act, no residual path."""

    def __call__(self, x: Tensor) -> Tensor:
        self._check(x)
        return leaky_relu(self._feature_path(x), self.slope)


class ResidualBlock(_BlockBase):
    """act(F(x) + x), with F the two-conv path."""

    def __call__(self, x: Tensor) -> Tensor:
        self._check(x)
        return leaky_relu(self._feature_path(x) + self._skip(x), self.slope)


class SEResBlock(_BlockBase):
    """Residual block whose feature path is gated per channel before the sum.

    The gate for channel k is sigmoid of a two-layer bottleneck applied to the
    channel's global average, so each channel of the residual features is
    scaled by a value in (0, 1) before rejoining the identity path.
    """

    def __init__(self, rng, cin, cout, stride=1, slope=0.01, reduction=4):
        self.reduction = int(reduction)
        super().__init__(rng, cin, cout, stride=stride, slope=slope)

    def _extra(self, rng):
        mid = max(1, self.cout // self.reduction)
        self.fc1 = Dense(rng, self.cout, mid)
        self.fc2 = Dense(rng, mid, self.cout)

    def excitation(self, features: Tensor) -> Tensor:
        z = global_avg_pool3d(features)
        return sigmoid(self.fc2(leaky_relu(self.fc1(z), self.slope)))

    def __call__(self, x: Tensor) -> Tensor:
        self._check(x)
        r = self._feature_path(x)
        s = self.excitation(r)
        return leaky_relu(scale_channels(r, s) + self._skip(x), self.slope)

    def _named(self):
        yield "conv1", self.conv1
        yield "conv2", self.conv2
        yield "fc1", self.fc1
        yield "fc2", self.fc2
        if self.proj is not None:
            yield "proj", self.proj


_BLOCKS = {"plain": PlainBlock, "residual": ResidualBlock, "se_residual": SEResBlock}


def make_block(kind: str, rng, cin, cout, stride=1, slope=0.01, reduction=4):
    if kind not in _BLOCKS:
        raise ValueError(f"unknown block kind {kind!r}; expected one of {sorted(_BLOCKS)}")
    if kind == "se_residual":
        return SEResBlock(rng, cin, cout, stride=stride, slope=slope, reduction=reduction)
    return _BLOCKS[kind](rng, cin, cout, stride=stride, slope=slope)


class MergeMode(str, Enum):
    CONCAT = "concat"
    SUM = "sum"


class SkipMerge:
    """Joins a decoder feature map with its same-resolution encoder feature.

    Concat stacks channels. Sum adds them, routing the encoder feature through
    a 1x1x1 projection when the channel counts differ (and only then).
    """

    def __init__(self, rng, mode: MergeMode, decoder_ch: int, encoder_ch: int):
        self.mode = MergeMode(mode)
        self.decoder_ch, self.encoder_ch = decoder_ch, encoder_ch
        self.proj = None
        if self.mode is MergeMode.SUM and decoder_ch != encoder_ch:
            self.proj = Conv3(rng, encoder_ch, decoder_ch, 1, padding=0)

    @property
    def out_channels(self) -> int:
        if self.mode is MergeMode.CONCAT:
            return self.decoder_ch + self.encoder_ch
        return self.decoder_ch

    def __call__(self, decoder_feat: Tensor, encoder_feat: Tensor) -> Tensor:
        if decoder_feat.shape[2:] != encoder_feat.shape[2:]:
            raise ValueError(
                f"merge: spatial dims differ, {decoder_feat.shape} vs {encoder_feat.shape}"
            )
        if self.mode is MergeMode.CONCAT:
            return concat_channels(decoder_feat, encoder_feat)
        enc = self.proj(encoder_feat) if self.proj is not None else encoder_feat
        return decoder_feat + enc

    def parameters(self):
        if self.proj is None:
            return []
        return [(f"proj.{n}", p) for n, p in self.proj.parameters()]
