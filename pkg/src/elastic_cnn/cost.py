"""FLOPs and parameter accounting.

Convention: one multiply-accumulate counts as one FLOP.  Only convolutions and
the classifier's fully connected layer cost FLOPs; batch norm, activations,
pooling and resampling are free.  Parameters are every learnable scalar: conv
and fc weights, fc bias, and batch-norm scale/shift (running statistics are not
parameters).  All counts are exact integers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import ops
from .arch import ArchSpec, BlockSite, block_sites, stage_resolutions
from .blocks import RESNEXT
from .errors import InputError
from .ops import conv_output_size
from .tensor import Tensor, no_grad

CONVENTION = "MAC=1FLOP; conv+fc only; params include BN affine"

METHODS = (
    "single",
    "feature_pyramid_concat",
    "feature_pyramid_add",
    "filter_pyramid_standard",
    "filter_pyramid_dilated",
    "elastic",
)


@dataclass(frozen=True)
class CostQuery:
    method: str
    n: int
    c: int
    k: int
    q: int = 1
    b: tuple = (1,)
    r: tuple = (1,)

    def __post_init__(self):
        object.__setattr__(self, "b", tuple(Fraction(x) for x in self.b))
        object.__setattr__(self, "r", tuple(int(x) for x in self.r))
        if self.method not in METHODS:
            raise InputError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if min(self.n, self.c, self.k, self.q) < 1:
            raise InputError("n, c, k and q must be positive")
        if len(self.b) != self.q or len(self.r) != self.q:
            raise InputError(f"b and r must each have q={self.q} entries")
        if sum(1 / x for x in self.b) != 1:
            raise InputError(f"sum of 1/b_i must be 1, got {sum(1 / x for x in self.b)}")
        if self.q > 1 and any(x <= 1 for x in self.b):
            raise InputError("b_i must exceed 1 when q > 1")
        if any(x < 1 for x in self.r):
            raise InputError("scale ratios r_i must be >= 1")


def table1_cost(q: CostQuery) -> tuple[Fraction, Fraction]:
    """(FLOPs, params) of one k x k convolution on an n x n x c tensor, exact rationals."""
    n, c, k = Fraction(q.n), Fraction(q.c), Fraction(q.k)
    if q.method in ("single", "feature_pyramid_add", "filter_pyramid_dilated"):
        return n * n * c * k * k, c * k * k
    if q.method == "feature_pyramid_concat":
        return n * n * (q.q * c) * k * k, (q.q * c) * k * k
    if q.method == "filter_pyramid_standard":
        flops = sum(n * n * c * (k * r) ** 2 / b for b, r in zip(q.b, q.r))
        params = sum(c * (k * r) ** 2 / b for b, r in zip(q.b, q.r))
        return flops, params
    flops = sum((n / r) ** 2 * c * k * k / b for b, r in zip(q.b, q.r))
    return flops, c * k * k


def compare_methods(n: int, c: int, k: int, q: int, b: Sequence, r: Sequence) -> list[tuple[str, Fraction, Fraction]]:
    """Every multi-scaling row for one configuration."""
    rows = []
    for method in METHODS:
        rows.append((method, *table1_cost(CostQuery(method, n, c, k, q, tuple(b), tuple(r)))))
    return rows


def random_query(rng: np.random.Generator, max_q: int = 8, max_r: int = 8) -> CostQuery:
    q = int(rng.integers(1, max_q + 1))
    if q == 1:
        b = (Fraction(1),)
    else:
        weights = rng.integers(1, 9, size=q)
        total = int(weights.sum())
        b = tuple(Fraction(total, int(w)) for w in weights)
    r = tuple(int(x) for x in rng.integers(1, max_r + 1, size=q))
    return CostQuery("elastic", int(rng.integers(1, 257)), int(rng.integers(1, 2049)),
                     int(rng.choice([1, 3, 5, 7])), q, b, r)


@dataclass
class BoundReport:
    trials: int
    counterexamples: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.counterexamples


def verify_elastic_bound(generator: Callable[[np.random.Generator], CostQuery] = random_query,
                         trials: int = 10_000, seed: int = 0) -> BoundReport:
    """Check elastic FLOPs <= single-scale FLOPs (equal iff all r_i = 1) and equal params."""
    rng = np.random.default_rng(seed)
    report = BoundReport(trials)
    for _ in range(trials):
        q = generator(rng)
        ef, ep = table1_cost(q)
        sf, sp = table1_cost(CostQuery("single", q.n, q.c, q.k))
        all_native = all(r == 1 for r in q.r)
        ok = ep == sp and (ef == sf if all_native else ef < sf)
        if not ok:
            report.counterexamples.append((q, ef, sf, ep, sp))
    return report


# -- whole-model accounting -------------------------------------------------------


@dataclass(frozen=True)
class LayerCost:
    name: str
    kind: str  # conv | bn | fc
    flops: int
    params: int


@dataclass
class CostReport:
    name: str
    input_resolution: int
    per_layer: list[LayerCost]
    convention: str = CONVENTION

    @property
    def total_flops(self) -> int:
        return sum(layer.flops for layer in self.per_layer)

    @property
    def total_params(self) -> int:
        return sum(layer.params for layer in self.per_layer)

    @property
    def weight_params(self) -> int:
        """Parameters of conv and fc layers only (batch norm excluded)."""
        return sum(layer.params for layer in self.per_layer if layer.kind != "bn")

    def to_csv(self) -> str:
        lines = ["layer,kind,flops,params"]
        lines += [f"{l.name},{l.kind},{l.flops},{l.params}" for l in self.per_layer]
        return "\n".join(lines) + "\n"


def _conv(name: str, cin: int, cout: int, k: int, groups: int, out_res: int) -> LayerCost:
    params = cout * (cin // groups) * k * k
    return LayerCost(name, "conv", params * out_res * out_res, params)


def _bn(name: str, channels: int) -> LayerCost:
    return LayerCost(name, "bn", 0, 2 * channels)


def _branch_resolution(res: int, ratio: int, method: str) -> int:
    if ratio == 1:
        return res
    if method == "avgpool" and ratio & (ratio - 1) == 0:
        while ratio > 1:
            res = -(-res // 2)
            ratio //= 2
        return res
    return res // ratio


def _block_layers(prefix: str, site: BlockSite) -> list[LayerCost]:
    blk = site.block
    out: list[LayerCost] = []
    if blk.kind == RESNEXT:
        for i, br in enumerate(blk.branches):
            w = blk.branch_width(i)
            p = f"{prefix}.branch{i + 1}"
            r_in = _branch_resolution(site.in_resolution if blk.stride == 2 else site.resolution,
                                      br.scale_ratio, blk.resample)
            r_out = _branch_resolution(site.resolution, br.scale_ratio, blk.resample)
            out += [
                _conv(f"{p}.conv1", blk.in_channels, w, 1, 1, r_in), _bn(f"{p}.bn1", w),
                _conv(f"{p}.conv2", w, w, 3, br.cardinality, r_out), _bn(f"{p}.bn2", w),
                _conv(f"{p}.conv3", w, blk.out_channels, 1, 1, r_out), _bn(f"{p}.bn3", blk.out_channels),
            ]
        if blk.in_channels != blk.out_channels or blk.stride != 1:
            out += [
                _conv(f"{prefix}.projection", blk.in_channels, blk.out_channels, 1, 1, site.resolution),
                _bn(f"{prefix}.projection_bn", blk.out_channels),
            ]
    else:
        out.append(_bn(f"{prefix}.norm", blk.in_channels))
        for i, br in enumerate(blk.branches):
            w = blk.branch_width(i)
            p = f"{prefix}.branch{i + 1}"
            r = _branch_resolution(site.resolution, br.scale_ratio, blk.resample)
            out += [
                _conv(f"{p}.conv1", blk.in_channels, w, 1, 1, r), _bn(f"{p}.bn1", w),
                _conv(f"{p}.conv2", w, blk.growth, 3, br.cardinality, r),
            ]
    return out


def model_cost(spec: ArchSpec, input_res: Optional[int] = None) -> CostReport:
    """Symbolic per-layer FLOPs/params of ``spec`` evaluated at ``input_res``."""
    res = input_res or spec.input_resolution
    st = spec.stem
    stem_res = conv_output_size(res, st.kernel, st.stride, st.kernel // 2)
    layers = [_conv("stem.conv", 3, st.channels, st.kernel, 1, stem_res), _bn("stem.bn", st.channels)]
    resolutions = stage_resolutions(spec, res)
    prev_res = st.output_resolution(res)
    channels = st.channels
    sites = list(block_sites(spec, res))
    for s, stage in enumerate(spec.stages):
        if spec.family == "densenet" and s > 0:
            squeezed = int(channels * spec.compression)
            layers += [
                _bn(f"stage{s + 1}.transition.norm", channels),
                _conv(f"stage{s + 1}.transition.conv", channels, squeezed, 1, 1, prev_res),
            ]
        for site in sites:
            if site.stage == s:
                layers += _block_layers(f"stage{s + 1}.block{site.index + 1}", site)
        channels = stage.out_channels
        prev_res = resolutions[s]
    if spec.family == "densenet":
        layers.append(_bn("head.norm", channels))
    layers.append(LayerCost("fc", "fc", channels * spec.num_classes, channels * spec.num_classes + spec.num_classes))
    return CostReport(spec.name, res, layers)


def network_param_count(network) -> int:
    """Parameters counted by walking the built network's buffers."""
    return sum(t.size for t in network.parameters())


def measure_flops(network, input_res: Optional[int] = None) -> int:
    """MACs executed by one forward pass of a single image, recorded at the operator level."""
    res = input_res or network.spec.input_resolution
    was_training = network.training
    network.eval()
    x = Tensor(np.zeros((1, 3, res, res)))
    try:
        with no_grad(), ops.count_macs() as records:
            network(x)
    finally:
        network.train(was_training)
    return sum(macs for _, macs in records)


def format_summary(report: CostReport) -> str:
    return (
        f"{report.name} @ {report.input_resolution}px: "
        f"{report.total_params / 1e6:.2f}M params, {report.total_flops / 1e9:.3f}B FLOPs ({report.convention})"
    )
