"""Declarative architecture descriptions, presets and the config file format.

Config grammar
--------------
One ``key: value`` pair per line; ``#`` starts a comment.  Header keys are
``name``, ``family`` (``resnext`` | ``densenet``), ``input_resolution``,
``num_classes``, ``resample``, ``growth``, ``compression`` and ``stem``.
Each ``stage:`` line adds a stage, in network order.  ``stem`` and ``stage``
values are space-separated ``field=value`` items::

    stem: kernel=7 stride=2 channels=64 pool=max
    stage: blocks=6 out=256 resolution=56 stride=1 width=128 cardinality=32 elastic=yes branches=1:1/2:16,2:1/2:16

``branches`` lists ``scale_ratio:width_fraction:cardinality`` triples (``-``
when the stage has no Elastic template).  ``dump_config`` followed by
``parse_config`` is the identity on :class:`ArchSpec`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterator

from .blocks import DENSENET, RESAMPLE_METHODS, RESNEXT, BranchSpec, ElasticBlockSpec, split_branches
from .errors import ConfigError, UsageError
from .ops import conv_output_size

FAMILIES = ("resnext", "densenet")


@dataclass(frozen=True)
class StemSpec:
    kernel: int = 3
    stride: int = 1
    channels: int = 64
    pool: bool = False  # 3x3 stride-2 max pool after the stem conv

    def output_resolution(self, input_resolution: int) -> int:
        r = conv_output_size(input_resolution, self.kernel, self.stride, self.kernel // 2)
        if self.pool:
            r = conv_output_size(r, 3, 2, 1)
        return r


@dataclass(frozen=True)
class StageSpec:
    num_blocks: int
    out_channels: int
    resolution: int
    stride_on_entry: int = 1
    elastic: bool = False
    bottleneck_channels: int = 0
    cardinality: int = 1
    branches: tuple[BranchSpec, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "branches", tuple(self.branches))


@dataclass(frozen=True)
class ArchSpec:
    name: str
    family: str
    input_resolution: int
    stem: StemSpec
    stages: tuple[StageSpec, ...]
    num_classes: int
    growth: int = 0
    compression: Fraction = Fraction(1, 2)
    resample: str = "avgpool"

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(self, "compression", Fraction(self.compression))

    @property
    def block_counts(self) -> list[int]:
        return [s.num_blocks for s in self.stages]

    @property
    def min_resolution(self) -> int:
        return min(s.resolution for s in self.stages)

    @property
    def is_elastic(self) -> bool:
        return any(site.elastic for site in block_sites(self))

    @property
    def fc_width(self) -> int:
        return self.stages[-1].out_channels


@dataclass(frozen=True)
class BlockSite:
    """One block of a spec with everything needed to build or cost it."""

    stage: int
    index: int
    in_resolution: int
    resolution: int
    eligible: bool
    block: ElasticBlockSpec

    @property
    def elastic(self) -> bool:
        return self.block.is_elastic

    @property
    def coords(self) -> str:
        return f"stage {self.stage + 1}, block {self.index + 1}"


def stage_resolutions(spec: ArchSpec, input_resolution: int | None = None) -> list[int]:
    """Feature-map side of every stage for ``input_resolution`` (default: the spec's)."""
    r = spec.stem.output_resolution(input_resolution or spec.input_resolution)
    out = []
    for st in spec.stages:
        if st.stride_on_entry == 2:
            r = -(-r // 2)
        out.append(r)
    return out


def block_stride(spec: ArchSpec, stage: int, index: int) -> int:
    """Stride of a block's entry conv; DenseNet layers never stride (transitions do)."""
    if spec.family == "densenet" or index > 0:
        return 1
    return spec.stages[stage].stride_on_entry


def eligibility(spec: ArchSpec, stage: int, index: int) -> bool:
    """Elastic may be applied unless the block strides or runs at the lowest resolution tier."""
    if block_stride(spec, stage, index) == 2:
        return False
    return spec.stages[stage].resolution > spec.min_resolution


def default_template(family: str, cardinality: int,
                     fractions=(Fraction(1, 2), Fraction(1, 2)), ratios=(1, 2)) -> tuple[BranchSpec, ...]:
    if family == "densenet":
        return tuple(BranchSpec(r, Fraction(f), 1) for f, r in zip(fractions, ratios))
    return split_branches(cardinality, fractions, ratios)


def validate(spec: ArchSpec) -> None:
    if spec.family not in FAMILIES:
        raise ConfigError(f"unknown family {spec.family!r}")
    if spec.resample not in RESAMPLE_METHODS:
        raise ConfigError(f"unknown resample method {spec.resample!r}")
    if not spec.stages:
        raise ConfigError("an architecture needs at least one stage")
    if spec.num_classes < 1:
        raise ConfigError("num_classes must be positive")
    expected = stage_resolutions(spec)
    prev = None
    for i, (st, r) in enumerate(zip(spec.stages, expected)):
        if st.num_blocks < 1:
            raise ConfigError(f"stage {i + 1}: num_blocks must be positive")
        if st.stride_on_entry not in (1, 2):
            raise ConfigError(f"stage {i + 1}: stride_on_entry must be 1 or 2")
        if st.resolution != r:
            raise ConfigError(
                f"stage {i + 1}: resolution {st.resolution} inconsistent with input "
                f"{spec.input_resolution} and strides (expected {r})"
            )
        if prev is not None and st.resolution > prev:
            raise ConfigError(f"stage {i + 1}: resolutions must be non-increasing")
        prev = st.resolution
        if st.elastic and not st.branches:
            raise ConfigError(f"stage {i + 1}: elastic stage without a branch template")
    list(block_sites(spec))


def block_sites(spec: ArchSpec, input_resolution: int | None = None) -> Iterator[BlockSite]:
    """Enumerate blocks with their specs; raises ConfigError naming block coordinates."""
    resolutions = stage_resolutions(spec, input_resolution)
    channels = spec.stem.channels
    prev_res = spec.stem.output_resolution(input_resolution or spec.input_resolution)
    for s, (st, res) in enumerate(zip(spec.stages, resolutions)):
        if spec.family == "densenet" and s > 0:
            channels = int(channels * spec.compression)
        for b in range(st.num_blocks):
            stride = block_stride(spec, s, b)
            eligible = eligibility(spec, s, b)
            use_elastic = st.elastic and eligible
            in_res = prev_res if (b == 0 and spec.family == "resnext") else res
            coords = f"stage {s + 1}, block {b + 1}"
            try:
                if spec.family == "resnext":
                    branches = st.branches if use_elastic else (BranchSpec(1, Fraction(1), st.cardinality),)
                    block = ElasticBlockSpec(
                        RESNEXT, channels, st.bottleneck_channels, st.out_channels, branches,
                        stride=stride, resample=spec.resample,
                    )
                    channels = st.out_channels
                else:
                    branches = st.branches if use_elastic else (BranchSpec(1, Fraction(1), 1),)
                    block = ElasticBlockSpec(
                        DENSENET, channels, st.bottleneck_channels, channels + spec.growth, branches,
                        residual=False, growth=spec.growth, resample=spec.resample,
                    )
                    channels += spec.growth
                if use_elastic:
                    block.check_resolution(res, res)
            except ConfigError as exc:
                raise ConfigError(f"{spec.name}: {coords}: {exc}") from None
            yield BlockSite(s, b, in_res, res, eligible, block)
        if channels != st.out_channels:
            raise ConfigError(
                f"{spec.name}: stage {s + 1} ends with {channels} channels, spec says {st.out_channels}"
            )
        prev_res = res


def count_elastic_blocks(spec: ArchSpec) -> int:
    return sum(site.elastic for site in block_sites(spec))


def selastic_transform(spec: ArchSpec, fractions=(Fraction(1, 2), Fraction(1, 2)),
                       ratios=(1, 2)) -> ArchSpec:
    """Swap eligible baseline blocks for Elastic ones in place (same depths and widths)."""
    if spec.is_elastic:
        raise UsageError(f"{spec.name} already contains Elastic blocks")
    stages = tuple(
        replace(st, elastic=True, branches=default_template(spec.family, st.cardinality, fractions, ratios))
        for st in spec.stages
    )
    out = replace(spec, name=f"{spec.name}_selastic", stages=stages)
    validate(out)
    return out


# -- presets ---------------------------------------------------------------------

IMAGENET_STEM = StemSpec(kernel=7, stride=2, channels=64, pool=True)


def _resnext(name: str, blocks, elastic: bool, input_resolution: int = 224, num_classes: int = 1000,
             stem: StemSpec = IMAGENET_STEM, outs=(256, 512, 1024, 2048), widths=(128, 256, 512, 1024),
             cardinality: int = 32, elastic_stages=None) -> ArchSpec:
    stages = []
    r = stem.output_resolution(input_resolution)
    for i, (n, out, width) in enumerate(zip(blocks, outs, widths)):
        stride = 1 if i == 0 else 2
        if stride == 2:
            r = -(-r // 2)
        on = elastic and (elastic_stages is None or i in elastic_stages)
        stages.append(StageSpec(
            n, out, r, stride, on, width, cardinality,
            default_template("resnext", cardinality) if on else (),
        ))
    spec = ArchSpec(name, "resnext", input_resolution, stem, tuple(stages), num_classes)
    validate(spec)
    return spec


def _densenet(name: str, blocks, elastic: bool, growth: int = 32, width: int = 128,
              input_resolution: int = 224, num_classes: int = 1000, stem: StemSpec = IMAGENET_STEM) -> ArchSpec:
    stages = []
    r = stem.output_resolution(input_resolution)
    c = stem.channels
    for i, n in enumerate(blocks):
        if i > 0:
            c = c // 2
            r = -(-r // 2)
        c += n * growth
        stages.append(StageSpec(
            n, c, r, 1 if i == 0 else 2, elastic, width, 1,
            default_template("densenet", 1) if elastic else (),
        ))
    spec = ArchSpec(name, "densenet", input_resolution, stem, tuple(stages), num_classes, growth=growth)
    validate(spec)
    return spec


TOY_STEM = StemSpec(kernel=3, stride=1, channels=16, pool=False)
TOY_OUTS = (32, 64, 128)
TOY_WIDTHS = (16, 32, 64)
TOY_CARDINALITY = 8


def toy_presets(num_classes: int = 4) -> list[ArchSpec]:
    """Desk-scale reductions: CIFAR-sized inputs, stages at 32/16/8.

    Each Elastic variant rebalances block counts towards the high-resolution
    stages so its FLOPs stay within 5% of its baseline partner.
    """
    common = dict(input_resolution=32, num_classes=num_classes, stem=TOY_STEM)
    resnext = dict(outs=TOY_OUTS, widths=TOY_WIDTHS, cardinality=TOY_CARDINALITY, **common)
    return [
        _resnext("toy_resnext_8", (2, 2, 2), False, **resnext),
        _resnext("toy_resnext_8_elastic", (3, 4, 1), True, **resnext),
        _densenet("toy_densenet_8", (3, 3, 3), False, growth=12, width=48, **common),
        _densenet("toy_densenet_8_elastic", (4, 5, 3), True, growth=12, width=48, **common),
    ]


def _presets() -> dict[str, ArchSpec]:
    resnext50 = _resnext("resnext50", (3, 4, 6, 3), False)
    resnext101 = _resnext("resnext101", (3, 4, 23, 3), False)
    densenet201 = _densenet("densenet201", (6, 12, 48, 32), False)
    table = {
        "resnext50": resnext50,
        "resnext50_selastic": selastic_transform(resnext50),
        "resnext50_elastic": _resnext("resnext50_elastic", (6, 8, 5, 3), True, elastic_stages=(0, 1, 2)),
        "resnext101": resnext101,
        "resnext101_selastic": selastic_transform(resnext101),
        "resnext101_elastic": _resnext("resnext101_elastic", (12, 14, 20, 3), True, elastic_stages=(0, 1, 2)),
        "densenet201": densenet201,
        "densenet201_selastic": selastic_transform(densenet201),
        "densenet201_elastic": _densenet("densenet201_elastic", (10, 20, 40, 30), True),
    }
    for spec in toy_presets():
        table[spec.name] = spec
    return table


PRESETS: dict[str, ArchSpec] = _presets()


def get_preset(name: str, num_classes: int | None = None) -> ArchSpec:
    try:
        spec = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}") from None
    return spec if num_classes is None else replace(spec, num_classes=num_classes)


def load_arch(name_or_path: str, num_classes: int | None = None) -> ArchSpec:
    """Resolve a preset name or an architecture config file path."""
    if name_or_path in PRESETS:
        return get_preset(name_or_path, num_classes)
    path = Path(name_or_path)
    if not path.exists():
        raise ConfigError(f"{name_or_path!r} is neither a preset nor a config file")
    spec = parse_config(path.read_text())
    return spec if num_classes is None else replace(spec, num_classes=num_classes)


# -- config text format ---------------------------------------------------------


def _fmt_branches(branches) -> str:
    if not branches:
        return "-"
    return ",".join(f"{b.scale_ratio}:{b.width_fraction}:{b.cardinality}" for b in branches)


def dump_config(spec: ArchSpec) -> str:
    st = spec.stem
    lines = [
        "# elastic-cnn architecture v1",
        f"name: {spec.name}",
        f"family: {spec.family}",
        f"input_resolution: {spec.input_resolution}",
        f"num_classes: {spec.num_classes}",
        f"resample: {spec.resample}",
        f"growth: {spec.growth}",
        f"compression: {spec.compression}",
        f"stem: kernel={st.kernel} stride={st.stride} channels={st.channels} pool={'max' if st.pool else 'none'}",
    ]
    for s in spec.stages:
        lines.append(
            f"stage: blocks={s.num_blocks} out={s.out_channels} resolution={s.resolution} "
            f"stride={s.stride_on_entry} width={s.bottleneck_channels} cardinality={s.cardinality} "
            f"elastic={'yes' if s.elastic else 'no'} branches={_fmt_branches(s.branches)}"
        )
    return "\n".join(lines) + "\n"


def _fields(text: str, lineno: int) -> dict[str, str]:
    out = {}
    for item in text.split():
        if "=" not in item:
            raise ConfigError(f"line {lineno}: expected field=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k] = v
    return out


def _int(fields: dict, key: str, lineno: int) -> int:
    try:
        return int(fields[key])
    except KeyError:
        raise ConfigError(f"line {lineno}: missing field {key!r}") from None
    except ValueError:
        raise ConfigError(f"line {lineno}: field {key!r} must be an integer") from None


def _bool(value: str, lineno: int) -> bool:
    if value in ("yes", "true"):
        return True
    if value in ("no", "false"):
        return False
    raise ConfigError(f"line {lineno}: expected yes/no, got {value!r}")


def _parse_branches(text: str, lineno: int) -> tuple[BranchSpec, ...]:
    if text == "-":
        return ()
    out = []
    for item in text.split(","):
        parts = item.split(":")
        if len(parts) != 3:
            raise ConfigError(f"line {lineno}: branch {item!r} is not ratio:fraction:cardinality")
        try:
            out.append(BranchSpec(int(parts[0]), Fraction(parts[1]), int(parts[2])))
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad branch {item!r}: {exc}") from None
    return tuple(out)


def parse_config(text: str) -> ArchSpec:
    header: dict[str, str] = {}
    stem = None
    stages = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise ConfigError(f"line {lineno}: expected 'key: value'")
        key, value = (part.strip() for part in line.split(":", 1))
        if key == "stem":
            f = _fields(value, lineno)
            stem = StemSpec(_int(f, "kernel", lineno), _int(f, "stride", lineno),
                            _int(f, "channels", lineno), f.get("pool", "none") == "max")
        elif key == "stage":
            f = _fields(value, lineno)
            stages.append(StageSpec(
                num_blocks=_int(f, "blocks", lineno),
                out_channels=_int(f, "out", lineno),
                resolution=_int(f, "resolution", lineno),
                stride_on_entry=_int(f, "stride", lineno),
                elastic=_bool(f.get("elastic", "no"), lineno),
                bottleneck_channels=_int(f, "width", lineno),
                cardinality=_int(f, "cardinality", lineno),
                branches=_parse_branches(f.get("branches", "-"), lineno),
            ))
        elif key in ("name", "family", "input_resolution", "num_classes", "resample", "growth", "compression"):
            header[key] = value
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    for key in ("name", "family", "input_resolution", "num_classes"):
        if key not in header:
            raise ConfigError(f"missing header key {key!r}")
    if stem is None:
        raise ConfigError("missing 'stem' line")
    try:
        spec = ArchSpec(
            name=header["name"],
            family=header["family"],
            input_resolution=int(header["input_resolution"]),
            stem=stem,
            stages=tuple(stages),
            num_classes=int(header["num_classes"]),
            growth=int(header.get("growth", 0)),
            compression=Fraction(header.get("compression", "1/2")),
            resample=header.get("resample", "avgpool"),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    validate(spec)
    return spec
