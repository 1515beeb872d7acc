"""Finite-difference gradient suite over every differentiable primitive.

Each case builds fresh random inputs from a seed and reduces the op output to
a scalar through a fixed random weighting, so that ops with constant sums
(softmax, layernorm) still produce non-trivial gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import functional as F
from .config import ModelConfig
from .gradcheck import GradCheckReport, grad_check
from .model import TransformerBlock, transformer_block
from .tensor import (
    Tensor,
    concat,
    exp,
    log,
    matmul,
    permute,
    reduce_mean,
    reduce_sum,
    reshape,
    scale,
    split,
    take,
)

H = 1e-5
TOL = 1e-4


def _weighted(out: Tensor, rng_w: np.ndarray) -> Tensor:
    return reduce_sum(out * Tensor(rng_w))


def _randn(rng, *shape):
    return Tensor(rng.standard_normal(shape))


def _elementwise(op):
    def build(rng):
        a, b = _randn(rng, 3, 4), _randn(rng, 1, 4)
        w = rng.standard_normal((3, 4))
        return (lambda a, b: _weighted(op(a, b), w)), [a, b]

    return build


def _matmul(rng):
    a, b = _randn(rng, 2, 4, 5), _randn(rng, 5, 3)
    w = rng.standard_normal((2, 4, 3))
    return (lambda a, b: _weighted(matmul(a, b), w)), [a, b]


def _conv(k):
    def build(rng):
        x, wt, b = _randn(rng, 2, 3, 8, 8), _randn(rng, 4, 3, k, k), _randn(rng, 4)
        w = rng.standard_normal((2, 4, 8, 8))
        return (lambda x, wt, b: _weighted(F.conv2d(x, wt, b, pad=k // 2), w)), [x, wt, b]

    return build


def _conv_transpose(rng):
    x, wt, b = _randn(rng, 2, 3, 4, 4), _randn(rng, 3, 2, 4, 4), _randn(rng, 2)
    w = rng.standard_normal((2, 2, 8, 8))
    return (lambda x, wt, b: _weighted(F.conv_transpose2d(x, wt, b, stride=2), w)), [x, wt, b]


def _upsample(rng):
    x = _randn(rng, 2, 2, 3, 4)
    w = rng.standard_normal((2, 2, 6, 8))
    return (lambda x: _weighted(F.bilinear_upsample(x, 2), w)), [x]


def _downsample(rng):
    x = _randn(rng, 1, 2, 8, 8)
    w = rng.standard_normal((1, 2, 4, 4))
    return (lambda x: _weighted(F.resize_bilinear(x, 4, 4), w)), [x]


def _softmax(rng):
    x = _randn(rng, 3, 5)
    w = rng.standard_normal((3, 5))
    return (lambda x: _weighted(F.softmax(x, axis=-1), w)), [x]


def _layernorm(rng):
    x, g, b = _randn(rng, 4, 6), _randn(rng, 6), _randn(rng, 6)
    w = rng.standard_normal((4, 6))
    return (lambda x, g, b: _weighted(F.layernorm(x, g, b), w)), [x, g, b]


def _gelu(rng):
    x = _randn(rng, 4, 5)
    w = rng.standard_normal((4, 5))
    return (lambda x: _weighted(F.gelu(x), w)), [x]


def _split_concat(rng):
    x = _randn(rng, 2, 8, 3)
    w = rng.standard_normal((2, 8, 3))

    def f(x):
        a, b, c = split(x, [2, 3, 3], axis=1)
        return _weighted(concat([c * 2.0, a, b * b], axis=1), w)

    return f, [x]


def _layout(rng):
    x = _randn(rng, 2, 3, 4)
    w = rng.standard_normal((4, 6))
    return (lambda x: _weighted(reshape(permute(x, (2, 0, 1)), (4, 6)), w)), [x]


def _reductions(rng):
    x = _randn(rng, 3, 4, 5)
    w1, w2 = rng.standard_normal((3, 5)), rng.standard_normal((4,))
    return (lambda x: _weighted(reduce_sum(x, axis=1), w1) + _weighted(reduce_mean(x, axis=(0, 2)), w2)), [x]


def _exp_log(rng):
    x = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)))
    w = rng.standard_normal((3, 4))
    return (lambda x: _weighted(log(x) + exp(x * 0.5), w)), [x]


def _take(rng):
    table = _randn(rng, 7, 2)
    idx = rng.integers(0, 7, size=(4, 5))
    w = rng.standard_normal((4, 5, 2))
    return (lambda t: _weighted(take(t, idx), w)), [table]


def _transformer_block(rng):
    cfg = ModelConfig(embed_dim=16, num_heads=2, height=24, width=24, patch_size=8, window_size=3)
    blk = TransformerBlock(rng, cfg)
    # nonzero relative bias so its gradient path is exercised
    blk.attn.bias_table.data = rng.standard_normal(blk.attn.bias_table.shape) * 0.5
    params = blk.parameters()
    z = _randn(rng, 1, 9, 16)
    w = rng.standard_normal((1, 9, 16))

    def f(z, *ps):
        return _weighted(transformer_block(z, blk), w)

    return f, [z, *params]


CASES: dict[str, Callable] = {
    "add": _elementwise(lambda a, b: a + b),
    "sub": _elementwise(lambda a, b: a - b),
    "mul": _elementwise(lambda a, b: a * b),
    "div": _elementwise(lambda a, b: a / (b * b + 1.0)),
    "scale": _elementwise(lambda a, b: scale(a, 3.5) + b),
    "matmul": _matmul,
    "conv2d_k1": _conv(1),
    "conv2d_k3": _conv(3),
    "conv2d_k5": _conv(5),
    "conv_transpose2d": _conv_transpose,
    "bilinear_upsample": _upsample,
    "resize_bilinear_down": _downsample,
    "softmax": _softmax,
    "layernorm": _layernorm,
    "gelu": _gelu,
    "split_concat": _split_concat,
    "reshape_permute": _layout,
    "reduce_sum_mean": _reductions,
    "exp_log": _exp_log,
    "take": _take,
    "transformer_block": _transformer_block,
}


@dataclass
class SuiteResult:
    name: str
    reports: list[GradCheckReport]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports)

    @property
    def max_rel_error(self) -> float:
        return max(r.max_rel_error for r in self.reports)


def run_case(name: str, seed: int, h: float = H, tol: float = TOL) -> GradCheckReport:
    rng = np.random.default_rng([seed, list(CASES).index(name)])
    f, inputs = CASES[name](rng)
    return grad_check(f, inputs, h=h, tol=tol)


def run_suite(seed: int = 0, n_seeds: int = 5, h: float = H, tol: float = TOL, names=None) -> list[SuiteResult]:
    results = []
    for name in names or CASES:
        reports = [run_case(name, seed + s, h, tol) for s in range(n_seeds)]
        results.append(SuiteResult(name, reports))
    return results
