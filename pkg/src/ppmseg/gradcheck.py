"""Finite-difference verification of every differentiable op."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .layers import (
    BatchNormParams,
    Conv2dParams,
    adaptive_avg_pool2d,
    batch_norm2d,
    concat_channels,
    conv2d,
    conv_transpose2d,
    max_pool2d,
    relu,
    sigmoid,
    upsample_bilinear,
)
from .metrics import gdl
from .model import ModelConfig, PPMConfig, build_model, forward
from .tensor import Tensor, add, grad_check, mean_all, mul, scalar_mul, sum_all

TOLERANCE = 1e-2
EPS = 1e-3


def _weighted(rng: np.random.Generator, shape) -> Callable[[Tensor], Tensor]:
    """Random linear functional, so every output element carries its own weight."""
    w = Tensor(rng.uniform(-1, 1, size=shape))
    return lambda y: sum_all(mul(y, w))


def _rand(rng, *shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape))


def _away_from_zero(rng, *shape) -> Tensor:
    x = rng.uniform(0.1, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return Tensor(x)


def _check_inputs(inputs: dict[str, Tensor], build: Callable[[dict[str, Tensor]], Tensor]) -> float:
    """Max grad_check error over each named input, holding the others fixed."""
    worst = 0.0
    for name, value in inputs.items():

        def f(t, name=name):
            return build({**inputs, name: t})

        worst = max(worst, grad_check(f, value, EPS))
    return worst


def _case_add(rng):
    a, b = _rand(rng, 2, 3, 4, 4), _rand(rng, 2, 3, 4, 4)
    red = _weighted(rng, (2, 3, 4, 4))
    return _check_inputs({"a": a, "b": b}, lambda t: red(add(t["a"], t["b"])))


def _case_mul(rng):
    a, b = _rand(rng, 2, 3, 4, 4), _rand(rng, 2, 3, 4, 4)
    red = _weighted(rng, (2, 3, 4, 4))
    return _check_inputs({"a": a, "b": b}, lambda t: red(scalar_mul(mul(t["a"], t["b"]), 1.5)))


def _case_sum_all(rng):
    return grad_check(sum_all, _rand(rng, 1, 2, 3, 4), EPS)


def _case_conv2d(rng):
    inputs = {"x": _rand(rng, 2, 3, 6, 5), "w": _rand(rng, 4, 3, 3, 3), "b": _rand(rng, 4)}
    red = _weighted(rng, (2, 4, 6, 5))
    return _check_inputs(
        inputs, lambda t: red(conv2d(t["x"], Conv2dParams(t["w"], t["b"], stride=1, padding=2, dilation=2)))
    )


def _case_conv_transpose2d(rng):
    inputs = {"x": _rand(rng, 2, 4, 3, 2), "w": _rand(rng, 4, 3, 2, 2), "b": _rand(rng, 3)}
    red = _weighted(rng, (2, 3, 6, 4))
    return _check_inputs(inputs, lambda t: red(conv_transpose2d(t["x"], t["w"], t["b"], stride=2)))


def _case_batch_norm2d(rng):
    red = _weighted(rng, (3, 4, 5, 6))
    x = _rand(rng, 3, 4, 5, 6, lo=-2, hi=2)
    inputs = {"x": x, "gamma": _rand(rng, 4, lo=0.5, hi=1.5), "beta": _rand(rng, 4)}

    def build(mode):
        def run(t):
            p = BatchNormParams(t["gamma"], t["beta"], np.zeros(4, np.float32), np.ones(4, np.float32), training=mode)
            if not mode:
                p.running_mean = np.linspace(-0.5, 0.5, 4).astype(np.float32)
                p.running_var = np.linspace(0.5, 2.0, 4).astype(np.float32)
            return red(batch_norm2d(t["x"], p))

        return run

    return max(_check_inputs(inputs, build(True)), _check_inputs(inputs, build(False)))


def _case_relu(rng):
    red = _weighted(rng, (2, 3, 4, 5))
    return grad_check(lambda t: red(relu(t)), _away_from_zero(rng, 2, 3, 4, 5), EPS)


def _case_sigmoid(rng):
    red = _weighted(rng, (2, 3, 4, 5))
    return grad_check(lambda t: red(sigmoid(t)), _rand(rng, 2, 3, 4, 5, lo=-2, hi=2), EPS)


def _case_max_pool2d(rng):
    # well separated distinct values so no +/-eps probe changes the argmax
    n = 2 * 3 * 4 * 6
    vals = rng.permutation(n).astype(np.float64) * 0.05
    red = _weighted(rng, (2, 3, 2, 3))
    return grad_check(lambda t: red(max_pool2d(t)), Tensor(vals.reshape(2, 3, 4, 6)), EPS)


def _case_adaptive_avg_pool2d(rng):
    red = _weighted(rng, (2, 3, 2, 3))
    return grad_check(lambda t: red(adaptive_avg_pool2d(t, (2, 3))), _rand(rng, 2, 3, 5, 6), EPS)


def _case_upsample_bilinear(rng):
    red = _weighted(rng, (1, 2, 5, 6))
    return grad_check(lambda t: red(upsample_bilinear(t, (5, 6))), _rand(rng, 1, 2, 2, 3), EPS)


def _case_concat(rng):
    inputs = {"a": _rand(rng, 2, 2, 3, 4), "b": _rand(rng, 2, 3, 3, 4)}
    red = _weighted(rng, (2, 5, 3, 4))
    return _check_inputs(inputs, lambda t: red(concat_channels([t["a"], t["b"]])))


def _case_gdl(rng):
    r = (rng.random((2, 1, 4, 4)) < 0.5).astype(np.float32)
    p = _rand(rng, 2, 1, 4, 4, lo=0.05, hi=0.95)
    return grad_check(lambda t: gdl(t, r), p, EPS)


def _case_model_head(rng):
    cfg = ModelConfig(
        input_size=(48, 64),
        encoder_stage_channels=(4, 4, 6, 6, 6),
        decoder_channels=(6, 4, 4, 4),
        ppm=PPMConfig(bins=(1, 2, 3)),
        seed=int(rng.integers(1 << 30)),
    )
    m = build_model(cfg).eval()
    x = Tensor(rng.random((1, 3, 48, 64)))
    head = m.convs["head"]
    inputs = {"w": Tensor(head.weight.data.copy()), "b": Tensor(head.bias.data.copy())}

    def run(t):
        m.convs["head"] = Conv2dParams(t["w"], t["b"])
        try:
            return mean_all(forward(m, x))
        finally:
            m.convs["head"] = head

    return _check_inputs(inputs, run)


CASES: dict[str, Callable[[np.random.Generator], float]] = {
    "add": _case_add,
    "mul": _case_mul,
    "sum_all": _case_sum_all,
    "conv2d": _case_conv2d,
    "conv_transpose2d": _case_conv_transpose2d,
    "batch_norm2d": _case_batch_norm2d,
    "relu": _case_relu,
    "sigmoid": _case_sigmoid,
    "max_pool2d": _case_max_pool2d,
    "adaptive_avg_pool2d": _case_adaptive_avg_pool2d,
    "upsample_bilinear": _case_upsample_bilinear,
    "concat": _case_concat,
    "gdl": _case_gdl,
    "model_head": _case_model_head,
}


def run_suite(seed: int = 0) -> list[tuple[str, float]]:
    """(op name, max relative error) for every case, each with its own seeded stream."""
    out = []
    for i, (name, case) in enumerate(CASES.items()):
        out.append((name, case(np.random.default_rng([seed, i]))))
    return out
