"""Elastic blocks: parallel branches at several resolutions merged at the native one.

A branch with scale ratio ``r`` downsamples its input by ``r``, applies its
transform, and upsamples the result back to the input resolution before the
merge, so every block preserves the spatial size of the stream it operates on.
Both block kinds are written so that a single native-resolution branch with the
full width executes exactly the operations of the corresponding baseline block.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from . import ops
from .errors import ConfigError, UsageError
from .nn import BatchNorm2d, Conv2d, Module
from .tensor import Tensor, add_n, concat

RESNEXT = "resnext_bottleneck"
DENSENET = "densenet_growth"
RESAMPLE_METHODS = ("avgpool", "bilinear", "nearest")


@dataclass(frozen=True)
class BranchSpec:
    scale_ratio: int = 1
    width_fraction: Fraction = Fraction(1)
    cardinality: int = 1

    def __post_init__(self):
        object.__setattr__(self, "width_fraction", Fraction(self.width_fraction))
        if self.scale_ratio < 1:
            raise ConfigError(f"scale_ratio must be >= 1, got {self.scale_ratio}")
        if not 0 < self.width_fraction <= 1:
            raise ConfigError(f"width_fraction must lie in (0, 1], got {self.width_fraction}")
        if self.cardinality < 1:
            raise ConfigError(f"cardinality must be positive, got {self.cardinality}")


def split_branches(cardinality: int, fractions: Sequence[Fraction] = (Fraction(1, 2), Fraction(1, 2)),
                   ratios: Sequence[int] = (1, 2)) -> tuple[BranchSpec, ...]:
    """Divide ``cardinality`` grouped paths across branches proportionally to ``fractions``."""
    branches = []
    for frac, r in zip(fractions, ratios):
        frac = Fraction(frac)
        card = cardinality * frac
        if card.denominator != 1:
            raise ConfigError(f"cardinality {cardinality} cannot be split by fraction {frac}")
        branches.append(BranchSpec(r, frac, int(card)))
    return tuple(branches)


@dataclass(frozen=True)
class ElasticBlockSpec:
    kind: str
    in_channels: int
    bottleneck_channels: int
    out_channels: int
    branches: tuple[BranchSpec, ...] = (BranchSpec(),)
    residual: bool = True
    growth: int = 0
    stride: int = 1
    resample: str = "avgpool"

    def __post_init__(self):
        object.__setattr__(self, "branches", tuple(self.branches))
        self.validate()

    def validate(self) -> None:
        if self.kind not in (RESNEXT, DENSENET):
            raise ConfigError(f"unknown block kind {self.kind!r}")
        if not self.branches:
            raise ConfigError("a block needs at least one branch")
        if sum(b.width_fraction for b in self.branches) != 1:
            raise ConfigError(
                f"branch width fractions sum to {sum(b.width_fraction for b in self.branches)}, expected 1"
            )
        if self.resample not in RESAMPLE_METHODS:
            raise ConfigError(f"unknown resample method {self.resample!r}")
        if self.stride not in (1, 2):
            raise ConfigError(f"stride must be 1 or 2, got {self.stride}")
        if self.stride != 1 and self.is_elastic:
            raise ConfigError("strided blocks cannot carry low-resolution branches")
        for i, b in enumerate(self.branches):
            width = self.bottleneck_channels * b.width_fraction
            if width.denominator != 1:
                raise ConfigError(
                    f"branch {i}: width {self.bottleneck_channels}*{b.width_fraction} is not an integer"
                )
            if int(width) % b.cardinality:
                raise ConfigError(f"branch {i}: width {width} not divisible by cardinality {b.cardinality}")
        if self.kind == DENSENET:
            if self.growth < 1:
                raise ConfigError("densenet blocks need a positive growth")
            if self.out_channels != self.in_channels + self.growth:
                raise ConfigError(
                    f"densenet block out_channels {self.out_channels} != in {self.in_channels} + growth {self.growth}"
                )

    @property
    def is_elastic(self) -> bool:
        return any(b.scale_ratio > 1 for b in self.branches)

    @property
    def cardinality(self) -> int:
        return sum(b.cardinality for b in self.branches)

    def branch_width(self, i: int) -> int:
        return int(self.bottleneck_channels * self.branches[i].width_fraction)

    def check_resolution(self, height: int, width: int) -> None:
        for i, b in enumerate(self.branches):
            if height % b.scale_ratio or width % b.scale_ratio:
                raise ConfigError(
                    f"branch {i}: resolution {height}x{width} not divisible by scale ratio {b.scale_ratio}"
                )

    def baseline(self) -> "ElasticBlockSpec":
        """The single-branch, native-resolution block with the same total width."""
        card = self.cardinality if self.kind == RESNEXT else 1
        return replace(self, branches=(BranchSpec(1, Fraction(1), card),))


# -- resampling ------------------------------------------------------------------


def downsample(x: Tensor, ratio: int, method: str = "avgpool") -> Tensor:
    if ratio == 1:
        return x
    h, w = x.shape[2] // ratio, x.shape[3] // ratio
    if method == "avgpool" and ratio & (ratio - 1) == 0:
        while ratio > 1:
            x = ops.avg_pool2(x)
            ratio //= 2
        return x
    if method == "nearest":
        return ops.nearest_resize(x, h, w)
    return ops.bilinear_resize(x, h, w)


def upsample(x: Tensor, height: int, width: int, method: str = "avgpool") -> Tensor:
    if x.shape[2:] == (height, width):
        return x
    if method == "nearest":
        return ops.nearest_resize(x, height, width)
    return ops.bilinear_resize(x, height, width)


# -- ResNeXt bottleneck ------------------------------------------------------------


class BottleneckBranch(Module):
    """1x1-BN-ReLU, grouped 3x3-BN-ReLU, 1x1-BN, wrapped in down/up resampling."""

    def __init__(self, in_ch: int, width: int, out_ch: int, branch: BranchSpec,
                 rng: np.random.Generator, stride: int = 1, resample: str = "avgpool"):
        self.scale_ratio = branch.scale_ratio
        self.resample = resample
        self.conv1 = Conv2d(in_ch, width, 1, rng)
        self.bn1 = BatchNorm2d(width)
        self.conv2 = Conv2d(width, width, 3, rng, stride=stride, groups=branch.cardinality)
        self.bn2 = BatchNorm2d(width)
        self.conv3 = Conv2d(width, out_ch, 1, rng)
        self.bn3 = BatchNorm2d(out_ch)
        self.captured: Optional[Tensor] = None
        self.capture = False

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        z = downsample(x, self.scale_ratio, self.resample)
        z = ops.relu(self.bn1(self.conv1(z)))
        z = ops.relu(self.bn2(self.conv2(z)))
        if self.capture:
            self.captured = z
        z = self.bn3(self.conv3(z))
        if self.scale_ratio > 1:
            z = upsample(z, h, w, self.resample)
        return z


class ElasticBottleneck(Module):
    """ResNeXt bottleneck whose grouped paths are spread over resolution branches.

    ``y = relu(shortcut(x) + sum_i branch_i(x))``; branches are summed in
    declaration order.  A 1x1 projection replaces the identity shortcut when the
    block strides or changes channel count.
    """

    def __init__(self, spec: ElasticBlockSpec, rng: np.random.Generator):
        if spec.kind != RESNEXT:
            raise ConfigError(f"ElasticBottleneck needs kind {RESNEXT!r}, got {spec.kind!r}")
        self.spec = spec
        self.branches = [
            BottleneckBranch(spec.in_channels, spec.branch_width(i), spec.out_channels, b, rng,
                             stride=spec.stride, resample=spec.resample)
            for i, b in enumerate(spec.branches)
        ]
        self.projection: Optional[Conv2d] = None
        self.projection_bn: Optional[BatchNorm2d] = None
        if spec.residual and (spec.in_channels != spec.out_channels or spec.stride != 1):
            self.projection = Conv2d(spec.in_channels, spec.out_channels, 1, rng, stride=spec.stride)
            self.projection_bn = BatchNorm2d(spec.out_channels)

    def shortcut(self, x: Tensor) -> Optional[Tensor]:
        if not self.spec.residual:
            return None
        if self.projection is None:
            return x
        return self.projection_bn(self.projection(x))

    def forward(self, x: Tensor) -> Tensor:
        self.spec.check_resolution(*x.shape[2:])
        merged = add_n([branch(x) for branch in self.branches])
        res = self.shortcut(x)
        if res is not None:
            merged = merged + res
        return ops.relu(merged)


# -- DenseNet layer -----------------------------------------------------------------


class GrowthBranch(Module):
    """[down] 1x1-BN-ReLU 3x3 [up], applied after the layer's shared pre-activation."""

    def __init__(self, in_ch: int, width: int, growth: int, branch: BranchSpec,
                 rng: np.random.Generator, resample: str = "avgpool"):
        self.scale_ratio = branch.scale_ratio
        self.resample = resample
        self.conv1 = Conv2d(in_ch, width, 1, rng)
        self.bn1 = BatchNorm2d(width)
        self.conv2 = Conv2d(width, growth, 3, rng, groups=branch.cardinality)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        z = downsample(x, self.scale_ratio, self.resample)
        z = ops.relu(self.bn1(self.conv1(z)))
        z = self.conv2(z)
        return upsample(z, h, w, self.resample) if self.scale_ratio > 1 else z


class ElasticDenseLayer(Module):
    """DenseNet layer: BN-ReLU on the stream, branches summed, result concatenated on."""

    def __init__(self, spec: ElasticBlockSpec, rng: np.random.Generator):
        if spec.kind != DENSENET:
            raise ConfigError(f"ElasticDenseLayer needs kind {DENSENET!r}, got {spec.kind!r}")
        self.spec = spec
        self.norm = BatchNorm2d(spec.in_channels)
        self.branches = [
            GrowthBranch(spec.in_channels, spec.branch_width(i), spec.growth, b, rng, spec.resample)
            for i, b in enumerate(spec.branches)
        ]

    def forward(self, stream: Tensor) -> Tensor:
        self.spec.check_resolution(*stream.shape[2:])
        z = ops.relu(self.norm(stream))
        new = add_n([branch(z) for branch in self.branches])
        return concat([stream, new], axis=1)


def build_block(spec: ElasticBlockSpec, rng: np.random.Generator) -> Module:
    if spec.kind == RESNEXT:
        return ElasticBottleneck(spec, rng)
    return ElasticDenseLayer(spec, rng)


def elastic_forward(x: Tensor, block: Module) -> Tensor:
    """Run either block kind; the output keeps the input's spatial size."""
    if not isinstance(block, (ElasticBottleneck, ElasticDenseLayer)):
        raise UsageError(f"not an Elastic block: {type(block).__name__}")
    return block(x)


def resnext_elastic_block(x: Tensor, block: ElasticBottleneck) -> Tensor:
    return elastic_forward(x, block)


def densenet_elastic_block(stream: Tensor, block: ElasticDenseLayer) -> Tensor:
    return elastic_forward(stream, block)
