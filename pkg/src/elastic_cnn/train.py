"""SGD training, evaluation at arbitrary resolutions, and the checkpoint format.

Checkpoint layout (all integers little-endian)::

    8 bytes   magic b"ELASTCKP"
    u32       format version
    u64       header length in bytes
    header    UTF-8 JSON, keys sorted: arch config text, manifest of
              (name, kind, shape) entries, step/epoch counters, RNG state,
              training config
    buffers   float32 little-endian arrays in manifest order

The manifest lists parameters, then batch-norm running statistics, then SGD
velocities.  Nothing time- or host-dependent is written, so identical runs
produce identical files.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import ops
from .arch import ArchSpec, block_sites, dump_config, load_arch, parse_config, stage_resolutions
from .cost import model_cost
from .data import STRATA, Dataset, SplitData, SyntheticSpec, augment, generate_synthetic, load_cifar10
from .errors import ConfigError, FormatError, InputError, TrainingDiverged
from .network import Network, build
from .tensor import DTYPE, Tensor, no_grad

MAGIC = b"ELASTCKP"
FORMAT_VERSION = 1
LOG_HEADER = ("epoch", "split", "loss", "top1")


@dataclass
class TrainConfig:
    arch: str = "toy_resnext_8"
    epochs: int = 2
    base_lr: float = 0.1
    lr_step_epochs: tuple = (30, 60, 90)
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    seed: int = 0
    dataset: str = "synthetic"
    dataset_params: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.base_lr < 0 or self.weight_decay < 0 or not 0 < self.lr_decay_factor <= 1:
            raise ConfigError("base_lr and weight_decay must be >= 0, lr_decay_factor in (0, 1]")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.dataset not in ("synthetic", "cifar10"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based ``epoch``: one decay per step epoch already reached."""
        passed = sum(1 for s in self.lr_step_epochs if epoch >= s)
        return self.base_lr * self.lr_decay_factor ** passed

    def to_json(self) -> dict:
        d = asdict(self)
        d["lr_step_epochs"] = list(self.lr_step_epochs)
        return d


def load_dataset(config: TrainConfig) -> SplitData:
    params = dict(config.dataset_params)
    if config.dataset == "cifar10":
        return load_cifar10(params["dir"])
    params.setdefault("seed", config.seed)
    if "scale_distribution" in params:
        params["scale_distribution"] = tuple(params["scale_distribution"])
    if "shapes_per_image" in params:
        params["shapes_per_image"] = tuple(params["shapes_per_image"])
    return generate_synthetic(SyntheticSpec(**params))


# -- optimizer -------------------------------------------------------------------------


class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient:

    g' = g + wd * w;  v = momentum * v + g';  w = w - lr * v
    """

    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = DTYPE(momentum)
        self.weight_decay = DTYPE(weight_decay)
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        lr = DTYPE(lr)
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= lr * v


# -- checkpoints -----------------------------------------------------------------------


@dataclass
class Checkpoint:
    arch_config: str
    arrays: dict  # name -> float32 array, manifest order
    kinds: dict  # name -> "param" | "buffer" | "velocity"
    step: int = 0
    epoch: int = 0
    rng_state: Optional[dict] = None
    config: Optional[dict] = None

    @property
    def spec(self) -> ArchSpec:
        return parse_config(self.arch_config)

    def header(self) -> dict:
        return {
            "arch": self.arch_config,
            "config": self.config,
            "epoch": self.epoch,
            "manifest": [{"name": n, "kind": self.kinds[n], "shape": list(a.shape)} for n, a in self.arrays.items()],
            "rng_state": self.rng_state,
            "step": self.step,
        }

    def to_bytes(self) -> bytes:
        header = json.dumps(self.header(), sort_keys=True, separators=(",", ":")).encode()
        chunks = [MAGIC, struct.pack("<IQ", FORMAT_VERSION, len(header)), header]
        chunks += [np.ascontiguousarray(a, dtype="<f4").tobytes() for a in self.arrays.values()]
        return b"".join(chunks)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes, source: str = "<bytes>") -> "Checkpoint":
        if blob[:8] != MAGIC:
            raise FormatError(f"{source}: not a checkpoint (bad magic)")
        version, hlen = struct.unpack_from("<IQ", blob, 8)
        if version != FORMAT_VERSION:
            raise FormatError(f"{source}: unsupported checkpoint version {version}")
        offset = 8 + 12
        header = json.loads(blob[offset:offset + hlen].decode())
        offset += hlen
        arrays, kinds = {}, {}
        for entry in header["manifest"]:
            count = int(np.prod(entry["shape"], dtype=np.int64))
            end = offset + 4 * count
            if end > len(blob):
                raise FormatError(f"{source}: truncated at buffer {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(entry["shape"]).astype(DTYPE)
            kinds[entry["name"]] = entry["kind"]
            offset = end
        if offset != len(blob):
            raise FormatError(f"{source}: {len(blob) - offset} trailing bytes after the last buffer")
        return cls(header["arch"], arrays, kinds, header["step"], header["epoch"], header["rng_state"], header["config"])

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes(), str(path))


def snapshot(network: Network, optimizer: Optional[SGD] = None, step: int = 0, epoch: int = 0,
             rng: Optional[np.random.Generator] = None, config: Optional[TrainConfig] = None) -> Checkpoint:
    arrays, kinds = {}, {}
    for name, t in network.named_parameters():
        arrays[name], kinds[name] = t.data.copy(), "param"
    for name, b in network.named_buffers():
        arrays[name], kinds[name] = b.copy(), "buffer"
    if optimizer is not None:
        names = [n for n, _ in network.named_parameters()]
        for name, v in zip(names, optimizer.velocity):
            arrays[f"velocity:{name}"], kinds[f"velocity:{name}"] = v.copy(), "velocity"
    return Checkpoint(
        dump_config(network.spec), arrays, kinds, step, epoch,
        None if rng is None else rng.bit_generator.state,
        None if config is None else config.to_json(),
    )


def restore(network: Network, ckpt: Checkpoint, optimizer: Optional[SGD] = None) -> None:
    """Copy checkpoint buffers into ``network``; mismatches name the first bad entry."""
    stored = [(n, a) for n, a in ckpt.arrays.items() if ckpt.kinds[n] == "param"]
    expected = list(network.named_parameters())
    for i in range(max(len(stored), len(expected))):
        if i >= len(stored) or i >= len(expected):
            name = expected[i][0] if i < len(expected) else stored[i][0]
            raise ConfigError(f"checkpoint/architecture mismatch at parameter {name!r}: present on one side only")
        (sn, sa), (en, et) = stored[i], expected[i]
        if sn != en or sa.shape != et.shape:
            raise ConfigError(f"checkpoint/architecture mismatch at parameter {en!r}: checkpoint has {sn!r} {sa.shape}, network {et.shape}")
    for (_, sa), (_, et) in zip(stored, expected):
        et.data[...] = sa
    for name, buf in network.named_buffers():
        if name not in ckpt.arrays or ckpt.arrays[name].shape != buf.shape:
            raise ConfigError(f"checkpoint/architecture mismatch at buffer {name!r}")
        buf[...] = ckpt.arrays[name]
    if optimizer is not None:
        for (name, _), v in zip(network.named_parameters(), optimizer.velocity):
            key = f"velocity:{name}"
            if key in ckpt.arrays:
                v[...] = ckpt.arrays[key]


def network_from_checkpoint(ckpt: Checkpoint) -> Network:
    net = build(ckpt.spec, seed=0)
    restore(net, ckpt)
    return net


# -- training --------------------------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    split: str
    loss: float
    top1: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[EpochLog]
    network: Network

    def log_csv(self) -> str:
        lines = [",".join(LOG_HEADER)]
        lines += [f"{r.epoch},{r.split},{r.loss:.6f},{r.top1:.6f}" for r in self.log]
        return "\n".join(lines) + "\n"


def _forward_loss(network: Network, x: np.ndarray, y: np.ndarray) -> tuple[Tensor, np.ndarray]:
    logits = network(Tensor(x))
    return ops.softmax_cross_entropy(logits, y), logits.data


def train(config: TrainConfig, data: Optional[SplitData] = None,
          log_path=None, checkpoint_path=None,
          on_epoch: Optional[Callable[[EpochLog], None]] = None) -> TrainResult:
    """Train ``config.arch``; the seed fixes initialization, data order and augmentation."""
    config.validate()
    data = data if data is not None else load_dataset(config)
    num_classes = int(data.train.labels.max()) + 1 if len(data.train) else 1
    if config.dataset == "synthetic":
        num_classes = max(num_classes, int(config.dataset_params.get("num_classes", SyntheticSpec.num_classes)))
    else:
        num_classes = 10
    spec = load_arch(config.arch, num_classes)
    network = build(spec, seed=config.seed)
    optimizer = SGD(network.parameters(), config.momentum, config.weight_decay)
    rng = np.random.default_rng([config.seed, 1])
    pad_crop = config.dataset == "cifar10"
    log: list[EpochLog] = []
    step = 0
    n = len(data.train)
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        network.train()
        order = rng.permutation(n)
        total_loss, correct = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            x = augment(data.train.batch(idx), rng, pad_crop=pad_crop)
            y = data.train.labels[idx]
            loss, logits = _forward_loss(network, x, y)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(epoch, step, lr, value)
            network.zero_grad()
            loss.backward()
            optimizer.step(lr)
            step += 1
            total_loss += value * len(idx)
            correct += int((logits.argmax(axis=1) == y).sum())
        rows = [EpochLog(epoch, "train", total_loss / max(n, 1), correct / max(n, 1))]
        if len(data.test):
            res = evaluate_network(network, data.test)
            rows.append(EpochLog(epoch, "test", res.loss, res.top1))
        log += rows
        if on_epoch is not None:
            for r in rows:
                on_epoch(r)
    network.eval()
    ckpt = snapshot(network, optimizer, step, config.epochs, rng, config)
    result = TrainResult(ckpt, log, network)
    if log_path is not None:
        Path(log_path).write_text(result.log_csv())
    if checkpoint_path is not None:
        ckpt.save(checkpoint_path)
    return result


# -- evaluation ------------------------------------------------------------------------


def resolution_ok(spec: ArchSpec, resolution: int) -> bool:
    if resolution < 1:
        return False
    try:
        sites = list(block_sites(spec, resolution))
    except ConfigError:
        return False
    if min(stage_resolutions(spec, resolution)) < 1:
        return False
    for site in sites:
        for b in site.block.branches:
            if site.resolution % b.scale_ratio:
                return False
    return True


def valid_resolutions(spec: ArchSpec, lo: int = 1, hi: Optional[int] = None) -> list[int]:
    hi = hi or 4 * spec.input_resolution
    return [r for r in range(lo, hi + 1) if resolution_ok(spec, r)]


@dataclass
class EvalResult:
    resolution: int
    loss: float
    top1: float
    count: int
    flops: int
    pool_input_shape: tuple
    strata: dict = field(default_factory=dict)  # name -> (top1, count)

    def rows(self) -> list[tuple]:
        out = [("overall", self.top1, self.count)]
        out += [(name, acc, cnt) for name, (acc, cnt) in self.strata.items()]
        return out


def resize_batch(x: np.ndarray, resolution: int) -> np.ndarray:
    """Bilinear resize of an NCHW batch to a square ``resolution``."""
    if x.shape[-1] == resolution and x.shape[-2] == resolution:
        return x
    return ops.bilinear_resize(Tensor(x), resolution, resolution).data


def evaluate_network(network: Network, dataset: Dataset, resolution: Optional[int] = None,
                     batch_size: int = 200) -> EvalResult:
    spec = network.spec
    resolution = resolution or dataset.resolution
    if not resolution_ok(spec, resolution):
        sizes = valid_resolutions(spec, 1, max(4 * spec.input_resolution, resolution))
        raise InputError(f"resolution {resolution} is not valid for {spec.name}; valid sizes up to "
                         f"{sizes[-1] if sizes else 0}: {', '.join(map(str, sizes))}")
    was_training = network.training
    network.eval()
    n = len(dataset)
    total_loss, preds = 0.0, np.empty(n, dtype=np.int64)
    pool_shape: tuple = ()
    try:
        with no_grad():
            for start in range(0, n, batch_size):
                idx = np.arange(start, min(n, start + batch_size))
                x = resize_batch(dataset.batch(idx), resolution)
                feats = network.features(Tensor(x))
                pool_shape = feats.shape[1:]
                logits = network.fc(ops.global_avg_pool(feats))
                y = dataset.labels[idx]
                total_loss += ops.softmax_cross_entropy(logits, y).item() * len(idx)
                preds[idx] = logits.data.argmax(axis=1)
    finally:
        network.train(was_training)
    hits = preds == dataset.labels
    strata = {}
    if dataset.strata is not None:
        for s, name in enumerate(STRATA):
            mask = dataset.strata == s
            if mask.any():
                strata[name] = (float(hits[mask].mean()), int(mask.sum()))
    return EvalResult(
        resolution, total_loss / max(n, 1), float(hits.mean()) if n else 0.0, n,
        model_cost(spec, resolution).total_flops, tuple(pool_shape), strata,
    )


def evaluate(checkpoint, dataset: Dataset, resolution: Optional[int] = None) -> EvalResult:
    """Evaluate a checkpoint (object or path) on ``dataset``, resizing inputs to ``resolution``."""
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = Checkpoint.load(checkpoint)
    return evaluate_network(network_from_checkpoint(checkpoint), dataset, resolution)


def stress_test(checkpoint, dataset: Dataset, resolutions: Sequence[int]) -> list[EvalResult]:
    """Evaluate at several input sizes; the global pool adapts to each feature map."""
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = Checkpoint.load(checkpoint)
    network = network_from_checkpoint(checkpoint)
    return [evaluate_network(network, dataset, r) for r in resolutions]


def read_log(path) -> list[EpochLog]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        return [EpochLog(int(r["epoch"]), r["split"], float(r["loss"]), float(r["top1"])) for r in reader]
