"""Central finite-difference checks of the analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import PARAM_NAMES, backprop, encode, init_params
from .raster import BBox
from .train import info_nce

STEP = 1e-5
ENCODER_TOLERANCE = 1e-5
LOSS_TOLERANCE = 1e-8


@dataclass(frozen=True)
class GradCheck:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error <= self.tolerance


def _rel(num: np.ndarray, ana: np.ndarray) -> float:
    return float(np.linalg.norm(num - ana) / max(np.linalg.norm(num), np.linalg.norm(ana), 1e-300))


def encoder_gradcheck(seed: int, probes: int = 6, size: int = 16) -> float:
    """Worst per-tensor relative error over coordinate probes plus one random direction.

    Probes whose +/- step flips a ReLU are redrawn: the loss is not
    differentiable across the kink and the difference quotient is meaningless.
    """
    rng = np.random.default_rng(seed)
    params = init_params(seed)
    img = rng.random((size, size, 3))
    x = int(rng.integers(0, size - 1))
    y = int(rng.integers(0, size - 1))
    roi = BBox(x, y, int(rng.integers(1, size - x + 1)), int(rng.integers(1, size - y + 1)))
    w = rng.standard_normal(64)

    def evaluate():
        v, cache = encode(params, img, roi)
        pattern = np.concatenate([(a > 0).ravel() for a in cache.acts[1:]] + [cache.h1 > 0])
        return float(w @ v), pattern

    v, cache = encode(params, img, roi)
    grads = backprop(params, cache, w)
    worst = 0.0
    for name in PARAM_NAMES:
        t = params.tensors[name]
        num, ana = [], []
        for _ in range(200):
            if len(num) == probes + 1:
                break
            d = np.zeros(t.shape)
            if len(num) < probes:
                d[tuple(int(rng.integers(s)) for s in t.shape)] = 1.0
            else:
                d = rng.standard_normal(t.shape)
                d /= np.linalg.norm(d)
            t += STEP * d
            lp, pp = evaluate()
            t -= 2 * STEP * d
            lm, pm = evaluate()
            t += STEP * d
            if not np.array_equal(pp, pm):
                continue
            num.append((lp - lm) / (2 * STEP))
            ana.append(float((grads[name] * d).sum()))
        worst = max(worst, _rel(np.array(num), np.array(ana)))
    return worst


def info_nce_gradcheck(seed: int, dim: int = 16, negatives: int = 20, tau: float = 0.2) -> float:
    rng = np.random.default_rng(seed)

    def unit():
        v = rng.standard_normal(dim)
        return v / np.linalg.norm(v)

    q, k = unit(), unit()
    negs = np.array([unit() for _ in range(negatives)])
    _, grad = info_nce(q, k, negs, tau)
    num = np.zeros(dim)
    for i in range(dim):
        e = np.zeros(dim)
        e[i] = STEP
        num[i] = (info_nce(q + e, k, negs, tau)[0] - info_nce(q - e, k, negs, tau)[0]) / (2 * STEP)
    return _rel(num, grad)


def run_gradchecks(seeds=range(5)) -> list[GradCheck]:
    seeds = list(seeds)
    return [
        GradCheck("encoder", max(encoder_gradcheck(s) for s in seeds), ENCODER_TOLERANCE),
        GradCheck("info_nce", max(info_nce_gradcheck(s) for s in seeds), LOSS_TOLERANCE),
    ]
