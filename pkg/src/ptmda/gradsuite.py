"""Seeded finite-difference checks of every differentiable building block."""

from __future__ import annotations

import zlib
from typing import Callable, Dict, List, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .losses import adversarial_domain_loss, cross_entropy, mc_loss, stage_objective
from .nn import BatchNorm, MatchingNorm, mn_forward

TOLERANCE = 1e-4

# A case draws one random instance as (f, inputs, expected_scale or None),
# or a list of such checks.
Check = Tuple[Callable[..., Tensor], List[Tensor], object]
Case = Callable[[np.random.Generator], Union[Check, List[Check]]]


def _cross_entropy(rng):
    y = rng.integers(0, 3, 5)
    return (lambda logits: cross_entropy(logits, y)), [Tensor(rng.normal(size=(5, 3)))], None


def _adversarial_with_grl(rng):
    # features pass through the reversal before the discriminator weights
    coeff = float(rng.uniform(0.5, 2.0))

    def f(x, w):
        d = ad.sigmoid(ad.grl(x, coeff) @ w)
        return adversarial_domain_loss(d[slice(0, 3)], d[slice(3, 7)])

    return f, [Tensor(rng.normal(size=(7, 4))), Tensor(rng.normal(size=(4, 1)))], (-coeff, 1.0)


def _mc(rng):
    y = np.array([0, 0, 1, 1, 2, 2, 0])
    rng.shuffle(y)
    return (lambda F: mc_loss(F, y)), [Tensor(rng.normal(size=(7, 3)))], None


def _stage_objective(rng):
    y = np.array([0, 1, 0, 1, 1, 0])
    lam = float(rng.uniform(0.0, 1.0))

    def f(logits, d_in, F):
        d = ad.sigmoid(d_in)
        adv = adversarial_domain_loss(d[slice(0, 3)], d[slice(3, 6)])
        return stage_objective(cross_entropy(logits, y), adv, mc_loss(F, y), lam)

    inputs = [Tensor(rng.normal(size=(6, 2))), Tensor(rng.normal(size=6)), Tensor(rng.normal(size=(6, 4)))]
    return f, inputs, None


def _mn(rng):
    # gamma/beta are constants on the source branch by design, so they are
    # checked through the target branch; the activations with gamma/beta fixed
    layer = MatchingNorm(3)
    w_s, w_t = Tensor(rng.normal(size=(5, 3))), Tensor(rng.normal(size=(4, 3)))
    h_s, h_t = rng.normal(size=(5, 3)), rng.normal(size=(4, 3))
    gamma, beta = rng.normal(size=3), rng.normal(size=3)

    def acts(hs, ht):
        layer.gamma, layer.beta = Tensor(gamma), Tensor(beta)
        z_s, z_t = mn_forward(hs, ht, layer, True)
        return ad.sum(z_s * w_s) + ad.sum(z_t * w_t)

    def affine(g, b):
        layer.gamma, layer.beta = g, b
        _, z_t = mn_forward(None, Tensor(h_t), layer, True)
        return ad.sum(z_t * w_t)

    return [
        (acts, [Tensor(h_s.copy()), Tensor(h_t.copy())], None),
        (affine, [Tensor(gamma.copy()), Tensor(beta.copy())], None),
    ]


def _bn(rng):
    layer = BatchNorm(3)
    w = rng.normal(size=(7, 3))

    def f(h, gamma, beta):
        layer.gamma, layer.beta = gamma, beta
        z_s, z_t = layer(h[np.arange(3)], h[np.arange(3, 7)])
        return ad.sum(ad.concat([z_s, z_t]) * Tensor(w))

    return f, [Tensor(rng.normal(size=(7, 3))), Tensor(rng.normal(size=3)), Tensor(rng.normal(size=3))], None


CASES: Dict[str, Case] = {
    "cross_entropy": _cross_entropy,
    "adversarial_grl": _adversarial_with_grl,
    "mc_loss": _mc,
    "stage_objective": _stage_objective,
    "mn_layer": _mn,
    "bn_layer": _bn,
}


def run_suite(instances: int = 20, seed: int = 0) -> Dict[str, float]:
    """Worst relative error per case over ``instances`` seeded draws."""
    out = {}
    for name, case in CASES.items():
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        worst = 0.0
        for _ in range(instances):
            checks = case(rng)
            for f, inputs, scale in checks if isinstance(checks, list) else [checks]:
                worst = max(worst, grad_check(f, inputs, expected_scale=scale))
        out[name] = worst
    return out
