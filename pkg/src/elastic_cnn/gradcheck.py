"""Central finite-difference oracle for the autograd engine.

The function under test may return a tensor of any shape.  It is reduced to a
scalar by a fixed random projection ``L = sum(P * f(x))``, P ~ N(1, 1),
accumulated in float64, so every output element contributes to the check.  Inputs stay
float32: the perturbation actually applied is the representable difference
``fl(x + eps) - fl(x - eps)``, not ``2 * eps``, which removes most of the
rounding bias a naive float32 difference would carry.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import ops
from .tensor import DTYPE, Tensor, no_grad


@dataclass
class InputReport:
    index: int
    shape: tuple
    checked: int
    max_abs_diff: float
    rel_error: float  # normalised by this input's own gradient scale
    scale: float = 0.0
    skipped: int = 0  # coordinates whose +/- evaluations straddled a kink


@dataclass
class GradCheckReport:
    """Outcome of one check.

    ``max_rel_error`` treats the gradients of all checked inputs as one
    vector: ``max|a - n| / max(|a|, |n|)`` over the concatenation.  Per-input
    ratios are kept in ``inputs`` for diagnosis; on tiny float32 tensors they
    can sit at the rounding floor when one input's gradient nearly cancels.
    """

    name: str
    tolerance: float
    inputs: list[InputReport] = field(default_factory=list)
    max_skip_fraction: float = 0.75

    @property
    def skipped_fraction(self) -> float:
        total = sum(r.checked + r.skipped for r in self.inputs)
        return sum(r.skipped for r in self.inputs) / total if total else 0.0

    @property
    def max_rel_error(self) -> float:
        scale = max((r.scale for r in self.inputs), default=0.0)
        if scale == 0.0:
            return 0.0
        return max(r.max_abs_diff for r in self.inputs) / scale

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance and self.skipped_fraction <= self.max_skip_fraction

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        line = f"{status} {self.name}: max rel err {self.max_rel_error:.2e} (tol {self.tolerance:.0e})"
        if self.skipped_fraction:
            line += f", {self.skipped_fraction:.0%} coords skipped at kinks"
        return line


def relative_error(analytic: np.ndarray, numeric: np.ndarray, scale: float = 0.0) -> float:
    """``max|a - n| / max(max|a|, max|n|, scale)``; 0 when everything is zero.

    ``scale`` lets a subsampled comparison normalise by the full gradient's
    magnitude rather than by whichever coordinates happened to be drawn.
    """
    scale = max(scale, float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-3,
               tolerance: float = 1e-3, seed: int = 0, max_coords: Optional[int] = 64,
               wrt: Optional[Sequence[int]] = None, name: str = "op",
               skip_kinks: bool = True) -> GradCheckReport:
    """Compare autograd against central differences for ``fn(*tensors)``.

    ``wrt`` selects which inputs get checked (default: all).  For inputs
    larger than ``max_coords`` elements a random subset of coordinates is
    perturbed; the analytic gradient is compared on the same subset and the
    error is normalised by the largest analytic entry of the whole tensor.

    When ``skip_kinks`` is set, a coordinate whose two evaluations took
    different ReLU / max-pool branches is dropped: the difference quotient
    then spans a non-differentiable point and says nothing about the
    gradient.  Skips are counted and too many of them fail the check.
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=DTYPE, copy=True) for a in inputs]
    wrt = range(len(arrays)) if wrt is None else wrt

    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    # mean-one weights: sum-like gradients (biases, BN shifts) cannot cancel to ~0
    projection = 1.0 + rng.standard_normal(out.shape)
    out.backward(projection.astype(DTYPE))

    def loss(vals: list[np.ndarray]) -> tuple[float, list]:
        with no_grad(), ops.record_patterns() as patterns:
            y = fn(*[Tensor(v) for v in vals])
        return float(np.sum(y.data.astype(np.float64) * projection)), patterns

    def same_piece(a: list, b: list) -> bool:
        return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))

    report = GradCheckReport(name, tolerance)
    for i in wrt:
        base = arrays[i]
        flat_size = base.size
        if max_coords is not None and flat_size > max_coords:
            coords = np.sort(rng.choice(flat_size, size=max_coords, replace=False))
        else:
            coords = np.arange(flat_size)
        analytic_full = tensors[i].grad
        analytic = (np.zeros(flat_size) if analytic_full is None
                    else analytic_full.reshape(-1).astype(np.float64))[coords]
        numeric = np.empty(len(coords))
        keep = np.ones(len(coords), dtype=bool)
        for j, c in enumerate(coords):
            vals = list(arrays)
            plus, minus = base.copy(), base.copy()
            plus.flat[c] = base.flat[c] + DTYPE(eps)
            minus.flat[c] = base.flat[c] - DTYPE(eps)
            vals[i] = plus
            lp, pp = loss(vals)
            vals[i] = minus
            lm, pm = loss(vals)
            numeric[j] = (lp - lm) / (float(plus.flat[c]) - float(minus.flat[c]))
            keep[j] = not skip_kinks or same_piece(pp, pm)
        analytic, numeric = analytic[keep], numeric[keep]
        full_scale = 0.0 if analytic_full is None else float(np.max(np.abs(analytic_full)))
        report.inputs.append(InputReport(
            i, base.shape, int(keep.sum()), float(np.max(np.abs(analytic - numeric), initial=0.0)),
            relative_error(analytic, numeric, full_scale),
            max(full_scale, float(np.max(np.abs(numeric), initial=0.0))),
            int((~keep).sum()),
        ))
    return report


# -- standard operator suite -------------------------------------------------------------

SINGLE_OP_TOL = 1e-3
COMPOSITION_TOL = 1e-2


def _small_shape(rng: np.random.Generator, even: bool = False) -> tuple[int, int, int, int]:
    """Batch 1-2, channels 1-4, sides 2-6: small enough that float32 rounding of
    the projected loss stays well under the single-op tolerance."""
    n, c = int(rng.integers(1, 3)), int(rng.integers(1, 5))
    sides = [2, 4, 6] if even else [2, 3, 4, 5, 6]
    return n, c, int(rng.choice(sides)), int(rng.choice(sides))


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 0.05) -> np.ndarray:
    x = rng.standard_normal(shape)
    return (x + np.sign(x) * margin).astype(DTYPE)


def _distinct(rng: np.random.Generator, shape, gap: float = 0.05) -> np.ndarray:
    """Values with pairwise gaps >= ``gap`` so an eps nudge never flips a max."""
    size = int(np.prod(shape))
    return (rng.permutation(size) * gap - size * gap / 2).reshape(shape).astype(DTYPE)


def _case(name: str, rng: np.random.Generator):
    """Return (fn, inputs, tolerance, wrt) for one random instance of ``name``."""
    from .ops import ConvParams, NormParams

    if name in ("conv2d", "conv2d_grouped"):
        g = 1 if name == "conv2d" else int(rng.choice([2, 3]))
        n, _, h, w = _small_shape(rng)
        cin, cout = g * int(rng.integers(1, 3)), g * int(rng.integers(1, 3))
        k = int(rng.choice([1, 3]))
        s = int(rng.choice([1, 2]))
        x = rng.standard_normal((n, cin, h, w)).astype(DTYPE)
        wt = rng.standard_normal((cout, cin // g, k, k)).astype(DTYPE)
        b = rng.standard_normal(cout).astype(DTYPE)
        fn = lambda x, wt, b: ops.conv2d(x, ConvParams(wt, b, s, k // 2, g))
        return fn, [x, wt, b], SINGLE_OP_TOL, None
    if name in ("batch_norm_train", "batch_norm_eval"):
        shape = _small_shape(rng)
        if name == "batch_norm_train" and shape[0] * shape[2] * shape[3] < 4:
            shape = (2,) + shape[1:]
        c = shape[1]
        x = rng.standard_normal(shape).astype(DTYPE)
        gamma = rng.uniform(0.5, 1.5, c).astype(DTYPE)
        beta = rng.standard_normal(c).astype(DTYPE)
        mean = rng.standard_normal(c).astype(DTYPE)
        var = rng.uniform(0.5, 2.0, c).astype(DTYPE)
        mode = name.rsplit("_", 1)[1]

        def fn(x, gamma, beta):
            p = NormParams(gamma, beta, mean.copy(), var.copy(), mode=mode)
            return ops.batch_norm(x, p)

        return fn, [x, gamma, beta], SINGLE_OP_TOL, None
    if name == "relu":
        return ops.relu, [_away_from_zero(rng, _small_shape(rng))], SINGLE_OP_TOL, None
    if name == "avg_pool2":
        return ops.avg_pool2, [rng.standard_normal(_small_shape(rng)).astype(DTYPE)], SINGLE_OP_TOL, None
    if name == "bilinear_resize":
        x = rng.standard_normal(_small_shape(rng)).astype(DTYPE)
        oh, ow = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        return (lambda x: ops.bilinear_resize(x, oh, ow)), [x], SINGLE_OP_TOL, None
    if name == "nearest_resize":
        x = rng.standard_normal(_small_shape(rng)).astype(DTYPE)
        oh, ow = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        return (lambda x: ops.nearest_resize(x, oh, ow)), [x], SINGLE_OP_TOL, None
    if name == "global_avg_pool":
        return ops.global_avg_pool, [rng.standard_normal(_small_shape(rng)).astype(DTYPE)], SINGLE_OP_TOL, None
    if name == "max_pool2d":
        shape = _small_shape(rng)
        return ops.max_pool2d, [_distinct(rng, shape)], SINGLE_OP_TOL, None
    if name == "linear":
        n, f, k = int(rng.integers(1, 5)), int(rng.integers(1, 9)), int(rng.integers(1, 6))
        x = rng.standard_normal((n, f, 1, 1)).astype(DTYPE)
        wt = rng.standard_normal((k, f)).astype(DTYPE)
        b = rng.standard_normal(k).astype(DTYPE)
        return ops.linear, [x, wt, b], SINGLE_OP_TOL, None
    if name == "softmax_cross_entropy":
        n, k = int(rng.integers(1, 6)), int(rng.integers(2, 8))
        labels = rng.integers(0, k, n)
        z = rng.standard_normal((n, k)).astype(DTYPE)
        return (lambda z: ops.softmax_cross_entropy(z, labels)), [z], SINGLE_OP_TOL, None
    if name == "add_n_concat":
        from .tensor import add_n, concat
        shape = _small_shape(rng)
        a, b = (rng.standard_normal(shape).astype(DTYPE) for _ in range(2))
        return (lambda a, b: concat([add_n([a, b, a]), b], axis=1)), [a, b], SINGLE_OP_TOL, None
    if name in ("elastic_resnext_block", "elastic_densenet_block"):
        return _block_case(name, rng)
    raise KeyError(name)


def _block_case(name: str, rng: np.random.Generator):
    from fractions import Fraction

    from .blocks import DENSENET, RESNEXT, BranchSpec, ElasticBlockSpec, build_block, split_branches

    seed = int(rng.integers(0, 2**31))
    x = rng.standard_normal((2, 8, 8, 8)).astype(DTYPE)
    if name == "elastic_resnext_block":
        out_ch = int(rng.choice([8, 16]))
        spec = ElasticBlockSpec(RESNEXT, 8, 8, out_ch, split_branches(4))
    else:
        halves = (BranchSpec(1, Fraction(1, 2)), BranchSpec(2, Fraction(1, 2)))
        spec = ElasticBlockSpec(DENSENET, 8, 8, 12, halves, growth=4)
    block = build_block(spec, np.random.default_rng(seed))
    return block, [x], COMPOSITION_TOL, None


SUITE_OPS = (
    "conv2d", "conv2d_grouped", "batch_norm_train", "batch_norm_eval", "relu", "avg_pool2",
    "bilinear_resize", "nearest_resize", "global_avg_pool", "max_pool2d", "linear",
    "softmax_cross_entropy", "add_n_concat", "elastic_resnext_block", "elastic_densenet_block",
)


def run_suite(trials: int = 20, seed: int = 0, ops_to_run: Sequence[str] = SUITE_OPS) -> dict[str, list[GradCheckReport]]:
    """``trials`` random instances of every operator; one report per instance."""
    results: dict[str, list[GradCheckReport]] = {}
    for k, name in enumerate(ops_to_run):
        rng = np.random.default_rng([seed, k])
        reports = []
        for t in range(trials):
            fn, inputs, tol, wrt = _case(name, rng)
            reports.append(grad_check(fn, inputs, tolerance=tol, seed=int(rng.integers(0, 2**31)),
                                      wrt=wrt, name=f"{name}[{t}]"))
        results[name] = reports
    return results
