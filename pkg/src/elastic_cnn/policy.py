"""Scale-policy scores read off live Elastic block activations.

For a two-tier block the score of one image is

    S = sum(x_high) / (4 H W C) - sum(x_low) / (H W C)

where ``x_high`` (C, 2H, 2W) and ``x_low`` (C, H, W) are the post-ReLU outputs
of the native and half-resolution 3x3 convolutions.  Positive S means the
image drove the high-resolution path harder.  Sums are taken in float64.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .blocks import ElasticBottleneck
from .errors import InputError, UsageError
from .tensor import Tensor, no_grad


def _array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _check_pair(high: np.ndarray, low: np.ndarray) -> None:
    if high.ndim != low.ndim or high.ndim not in (3, 4):
        raise InputError(f"expected two (C,H,W) or (N,C,H,W) arrays, got {high.shape} and {low.shape}")
    if high.shape[:-2] != low.shape[:-2]:
        raise InputError(f"high/low leading dims differ: {high.shape} vs {low.shape}")
    h, w = low.shape[-2:]
    if high.shape[-2:] != (2 * h, 2 * w):
        raise InputError(f"high branch must be exactly twice the low resolution: {high.shape} vs {low.shape}")


def block_scale_scores(x_high, x_low) -> np.ndarray:
    """Per-sample scores for batched (N, C, 2H, 2W) / (N, C, H, W) activations."""
    high, low = _array(x_high), _array(x_low)
    _check_pair(high, low)
    if high.ndim == 3:
        high, low = high[None], low[None]
    c, h, w = low.shape[1:]
    hi = high.astype(np.float64).reshape(len(high), -1).sum(axis=1) / (4 * h * w * c)
    lo = low.astype(np.float64).reshape(len(low), -1).sum(axis=1) / (h * w * c)
    return hi - lo


def block_scale_score(x_high, x_low) -> float:
    """Score of a single image; accepts (C, ., .) arrays or a batch of one."""
    scores = block_scale_scores(x_high, x_low)
    if len(scores) != 1:
        raise InputError(f"block_scale_score takes one image, got a batch of {len(scores)}")
    return float(scores[0])


@dataclass(frozen=True)
class PolicyTrace:
    image_id: str
    scores: tuple[float, ...]
    label: Optional[int] = None
    prediction: Optional[int] = None

    @property
    def category(self) -> Optional[int]:
        return self.label if self.label is not None else self.prediction


def _scored_blocks(network) -> list[ElasticBottleneck]:
    blocks = network.elastic_blocks()
    if not blocks:
        raise UsageError(f"{network.spec.name} has no Elastic blocks to trace")
    for i, block in enumerate(blocks):
        if not isinstance(block, ElasticBottleneck):
            raise UsageError(f"Elastic block {i + 1} is a {type(block).__name__}; only bottleneck blocks expose a post-ReLU 3x3 output")
        ratios = [b.scale_ratio for b in block.spec.branches]
        if sorted(ratios) != [1, 2]:
            raise UsageError(f"Elastic block {i + 1} has scale ratios {ratios}; scores need exactly one r=1 and one r=2 branch")
        widths = {block.spec.branch_width(j) for j in range(len(ratios))}
        if len(widths) != 1:
            raise UsageError(f"Elastic block {i + 1} has unequal branch widths {sorted(widths)}")
    return blocks


def trace_batch(network, images, image_ids: Sequence[str], labels: Optional[Sequence[int]] = None) -> list[PolicyTrace]:
    """One eval-mode forward pass over ``images`` (N, 3, H, W); one trace per image."""
    blocks = _scored_blocks(network)
    x = images if isinstance(images, Tensor) else Tensor(images)
    if len(image_ids) != x.shape[0]:
        raise InputError(f"{len(image_ids)} ids for {x.shape[0]} images")
    was_training = network.training
    network.eval()
    network.set_capture(True)
    try:
        with no_grad():
            logits = network(x)
        per_block = []
        for block in blocks:
            by_ratio = {b.scale_ratio: b.captured for b in block.branches}
            per_block.append(block_scale_scores(by_ratio[1], by_ratio[2]))
    finally:
        network.set_capture(False)
        network.train(was_training)
    scores = np.stack(per_block, axis=1)
    preds = logits.data.argmax(axis=1)
    return [
        PolicyTrace(str(image_ids[i]), tuple(float(s) for s in scores[i]),
                    None if labels is None else int(labels[i]), int(preds[i]))
        for i in range(len(image_ids))
    ]


def trace_image(network, image, image_id: str = "0", label: Optional[int] = None) -> PolicyTrace:
    arr = _array(image)
    if arr.ndim == 3:
        arr = arr[None]
    return trace_batch(network, arr, [image_id], None if label is None else [label])[0]


@dataclass(frozen=True)
class AggregateRow:
    key: object
    mean: float
    std: float
    count: int


def aggregate(traces: Iterable[PolicyTrace], group_by: str = "category") -> list[AggregateRow]:
    """Mean score per category (over blocks and images) or per block (over images).

    Rows come back sorted by mean score, smallest first, ties broken by key.
    """
    groups: dict[object, list[float]] = {}
    for t in traces:
        if group_by == "category":
            groups.setdefault(t.category, []).extend(t.scores)
        elif group_by == "block":
            for k, s in enumerate(t.scores):
                groups.setdefault(k + 1, []).append(s)
        else:
            raise InputError(f"group_by must be 'category' or 'block', got {group_by!r}")
    rows = [AggregateRow(k, float(np.mean(v)), float(np.std(v)), len(v)) for k, v in groups.items()]
    return sorted(rows, key=lambda r: (r.mean, str(r.key)))


def export_traces(traces: Sequence[PolicyTrace], path) -> None:
    path = Path(path)
    width = max((len(t.scores) for t in traces), default=0)
    try:
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["image_id", "label", "prediction"] + [f"s_{k + 1}" for k in range(width)])
            for t in traces:
                writer.writerow([
                    t.image_id,
                    "" if t.label is None else t.label,
                    "" if t.prediction is None else t.prediction,
                    *(f"{s:.6g}" for s in t.scores),
                ])
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write policy traces to {path}: {exc.strerror}") from exc


def import_traces(path) -> list[PolicyTrace]:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:3] != ["image_id", "label", "prediction"]:
            raise InputError(f"{path}: not a policy trace file (header {header})")
        out = []
        for row in reader:
            out.append(PolicyTrace(
                row[0],
                tuple(float(s) for s in row[3:]),
                int(row[1]) if row[1] else None,
                int(row[2]) if row[2] else None,
            ))
    return out


def format_aggregate(rows: Sequence[AggregateRow], key_name: str = "category") -> str:
    lines = [f"{key_name},mean_score,std,count"]
    lines += [f"{r.key},{r.mean:.6g},{r.std:.6g},{r.count}" for r in rows]
    return "\n".join(lines) + "\n"
