"""Executable networks built from an :class:`~elastic_cnn.arch.ArchSpec`."""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import ops
from .arch import ArchSpec, BlockSite, block_sites, validate
from .errors import InputError
from .blocks import ElasticBottleneck, ElasticDenseLayer, build_block
from .nn import BatchNorm2d, Conv2d, Linear, Module
from .tensor import Tensor


class Transition(Module):
    """DenseNet transition: BN-ReLU, 1x1 conv (compression), 2x2 average pool."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        self.norm = BatchNorm2d(in_ch)
        self.conv = Conv2d(in_ch, out_ch, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        return ops.avg_pool2(self.conv(ops.relu(self.norm(x))))


class Stage(Module):
    def __init__(self, blocks: list[Module], transition: Optional[Transition] = None):
        self.transition = transition
        self.blocks = blocks

    def forward(self, x: Tensor) -> Tensor:
        if self.transition is not None:
            x = self.transition(x)
        for block in self.blocks:
            x = block(x)
        return x


class Network(Module):
    def __init__(self, spec: ArchSpec, seed: int = 0):
        validate(spec)
        self.spec = spec
        rng = np.random.default_rng(seed)
        st = spec.stem
        self.stem_conv = Conv2d(3, st.channels, st.kernel, rng, stride=st.stride)
        self.stem_bn = BatchNorm2d(st.channels)
        self.sites: list[BlockSite] = list(block_sites(spec))
        stages: list[Stage] = []
        channels = st.channels
        for s in range(len(spec.stages)):
            transition = None
            if spec.family == "densenet" and s > 0:
                squeezed = int(channels * spec.compression)
                transition = Transition(channels, squeezed, rng)
            blocks = [build_block(site.block, rng) for site in self.sites if site.stage == s]
            stages.append(Stage(blocks, transition))
            channels = spec.stages[s].out_channels
        self.stages = stages
        self.head_norm = BatchNorm2d(channels) if spec.family == "densenet" else None
        self.fc = Linear(channels, spec.num_classes, rng)

    def blocks(self) -> list[Module]:
        return [b for stage in self.stages for b in stage.blocks]

    def elastic_blocks(self) -> list[Module]:
        return [b for b in self.blocks() if b.spec.is_elastic]

    def features(self, x: Tensor) -> Tensor:
        """Activations entering the global pool."""
        x = ops.relu(self.stem_bn(self.stem_conv(x)))
        if self.spec.stem.pool:
            x = ops.max_pool2d(x, 3, 2, 1)
        for stage in self.stages:
            x = stage(x)
        if self.head_norm is not None:
            x = ops.relu(self.head_norm(x))
        return x

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise InputError(f"expected (N, 3, H, W) images, got shape {x.shape}")
        return self.fc(ops.global_avg_pool(self.features(x)))

    def set_capture(self, enabled: bool) -> None:
        for block in self.elastic_blocks():
            for branch in block.branches:
                branch.capture = enabled
                if not enabled:
                    branch.captured = None


def build(spec: ArchSpec, seed: int = 0) -> Network:
    """Instantiate ``spec`` with He-normal conv/fc weights, BN gamma=1 and beta=0."""
    return Network(spec, seed)


__all__ = ["Network", "Stage", "Transition", "build", "ElasticBottleneck", "ElasticDenseLayer"]
