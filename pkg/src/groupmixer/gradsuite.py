"""
Finite-difference checks for every layer type of the model, in float64.

Each case builds a small, freshly initialized layer, projects its output onto
a fixed random tensor to get a scalar, and compares backprop against central
differences over all of the layer's parameters and its input.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import GradCheckResult, Variable, grad_check_detail
from .nn import BatchNorm2d, ConvMixerLayer, LinearHead, PatchEmbed
from .train import FocalLossConfig, balanced_alpha, focal_loss

TOLERANCE = 1e-5
F64 = np.float64


@dataclass
class CaseResult:
    name: str
    result: GradCheckResult

    @property
    def passed(self) -> bool:
        return self.result.checked > 0 and self.result.max_relative_error <= TOLERANCE


def _input(rng, shape) -> Variable:
    return Variable(rng.standard_normal(shape).astype(F64), requires_grad=True)


def _project(out: Variable, weights: np.ndarray) -> Variable:
    return ad.sum(ad.mul(out, weights))


def _corrupted(v: Variable) -> Variable:
    # identity forward, backward off by 50%
    return ad.record("corrupted", v.value, (v,), lambda g: (1.5 * g,))


def _case_layer(rng, module, fn, x_shape):
    module.astype(F64)
    x = _input(rng, x_shape)
    out_shape = fn(x).shape
    r = rng.standard_normal(out_shape)
    return (lambda wrap: _project(wrap(fn(x)), r)), module.parameters() + [x]


def build_cases(seed: int = 0) -> List[Tuple[str, Callable, list]]:
    """(name, loss builder, params) for each layer type."""
    rng = np.random.default_rng(seed)
    cases = []

    embed = PatchEmbed(3, 8, 2, rng, F64)
    cases.append(("patch_embed", *_case_layer(rng, embed, embed, (2, 3, 4, 4))))

    dw = ConvMixerLayer(8, 3, 1, rng, F64)
    cases.append(("depthwise_block_residual", *_case_layer(rng, dw, dw.depthwise, (2, 8, 4, 4))))

    for g in (1, 2, 4):
        pw = ConvMixerLayer(8, 3, g, rng, F64)
        name = f"pointwise_g{g}" + ("_shuffle" if g > 1 else "")
        f, params = _case_layer(rng, pw, pw.pointwise, (2, 8, 4, 4))
        # the depthwise weights are not on this path
        params = [p for p in params if p is not pw.dw_weight and p is not pw.dw_bias
                  and p is not pw.dw_bn.gamma and p is not pw.dw_bn.beta]
        cases.append((name, f, params))

    for g in (1, 2, 4):
        layer = ConvMixerLayer(8, 9, g, rng, F64)
        cases.append((f"convmixer_layer_g{g}", *_case_layer(rng, layer, layer, (1, 8, 6, 6))))

    bn = BatchNorm2d(6, dtype=F64)
    bn.gamma.value = rng.uniform(0.5, 1.5, 6)
    bn.beta.value = rng.standard_normal(6)
    cases.append(("batchnorm_train", *_case_layer(rng, bn, bn, (4, 6, 2, 2))))

    x = _input(rng, (3, 5, 3, 3))
    r = rng.standard_normal((3, 5))
    cases.append(("global_avg_pool", lambda wrap: _project(wrap(ad.global_avg_pool(x)), r), [x]))

    head = LinearHead(16, 2, rng, F64)
    cases.append(("linear_head", *_case_layer(rng, head, head, (5, 16))))

    logits = _input(rng, (6, 2))
    labels = np.array([0, 1, 1, 0, 1, 1])
    cfg = FocalLossConfig(gamma=2.0, alpha=balanced_alpha([2, 4]))
    cases.append(("focal_loss", lambda wrap: wrap(focal_loss(logits, labels, cfg)), [logits]))
    return cases


def run_suite(seed: int = 0, corrupt: Optional[str] = None, max_coords: int = 48) -> List[CaseResult]:
    """Run every case; ``corrupt`` names a case whose backward rule is sabotaged."""
    results = []
    for name, build_loss, params in build_cases(seed):
        wrap = _corrupted if name == corrupt else (lambda v: v)
        res = grad_check_detail(lambda: build_loss(wrap), params, max_coords=max_coords, seed=seed)
        results.append(CaseResult(name, res))
    return results


def case_names() -> List[str]:
    return [name for name, _, _ in build_cases()]
