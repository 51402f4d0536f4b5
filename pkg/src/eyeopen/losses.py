"""The three training losses and their weighted combination.

Each returns its value together with gradients w.r.t. the network outputs
it reads. An empty sub-batch makes a term inactive (value 0, zero grads);
``LossTerm.active`` records that instead of raising.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.01
    lambda2: float = 1.0
    lambda3: float = 1.0
    ot: float = 15.0

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.ot <= 0:
            raise ConfigError("openness threshold must be positive")


@dataclass
class LossTerm:
    value: float
    active: bool


def _col(a):
    return np.asarray(a).reshape(-1)


def loss1_mse(o2_s, labels):
    """Mean squared error between synthetic predictions and degree labels."""
    o2_s = np.asarray(o2_s)
    pred = _col(o2_s)
    lab = _col(labels).astype(pred.dtype, copy=False)
    if pred.size == 0:
        return LossTerm(0.0, False), np.zeros_like(o2_s)
    if lab.shape != pred.shape:
        raise DataError(f"loss1: {pred.size} predictions vs {lab.size} labels")
    diff = pred - lab
    value = float(np.mean(diff.astype(np.float64) ** 2))
    grad = (2.0 * diff / pred.size).astype(o2_s.dtype).reshape(o2_s.shape)
    return LossTerm(value, True), grad


def loss2_binary(o2_r, labels, ot=15.0):
    """Closed samples are pulled to 0 quadratically; open samples hinge at ``ot``."""
    o2_r = np.asarray(o2_r)
    pred = _col(o2_r)
    lab = _col(labels)
    if pred.size == 0:
        return LossTerm(0.0, False), np.zeros_like(o2_r)
    if lab.shape != pred.shape:
        raise DataError(f"loss2: {pred.size} predictions vs {lab.size} labels")
    if not np.all((lab == 0) | (lab == 1)):
        raise DataError("loss2 labels must be exactly 0 (closed) or 1 (open)")
    is_open = lab == 1
    n = pred.size
    p64 = pred.astype(np.float64)
    per = np.where(is_open, np.maximum(ot - p64, 0.0), p64 ** 2)
    value = float(per.sum() / n)
    grad = np.where(is_open, np.where(p64 < ot, -1.0, 0.0), 2.0 * p64) / n
    return LossTerm(value, True), grad.astype(o2_r.dtype).reshape(o2_r.shape)


def _sign(x):
    # subgradient of |.| at exactly 0 is taken as 0
    return float(np.sign(x))


def loss3_distribution(o1_s, o1_r):
    """|mean_S - mean_R| + |var_S - var_R| with scalar statistics over all elements."""
    o1_s = np.asarray(o1_s)
    o1_r = np.asarray(o1_r)
    if o1_s.size == 0 or o1_r.size == 0:
        return LossTerm(0.0, False), np.zeros_like(o1_s), np.zeros_like(o1_r)
    if o1_s.shape[1:] != o1_r.shape[1:]:
        raise DataError(f"loss3: feature widths differ ({o1_s.shape} vs {o1_r.shape})")
    s = o1_s.astype(np.float64)
    r = o1_r.astype(np.float64)
    ms, mr = s.mean(), r.mean()
    vs, vr = s.var(), r.var()
    dm, dv = ms - mr, vs - vr
    value = abs(dm) + abs(dv)
    sm, sv = _sign(dm), _sign(dv)
    # d mean/dx = 1/n ; d var/dx = 2(x - mean)/n
    gs = (sm + sv * 2.0 * (s - ms)) / s.size
    gr = -(sm + sv * 2.0 * (r - mr)) / r.size
    return LossTerm(float(value), True), gs.astype(o1_s.dtype), gr.astype(o1_r.dtype)


@dataclass
class CombinedLoss:
    total: float
    loss1: LossTerm
    loss2: LossTerm
    loss3: LossTerm
    d_o1_s: np.ndarray
    d_o2_s: np.ndarray
    d_o1_r: np.ndarray
    d_o2_r: np.ndarray


def combined_loss(o1_s, o2_s, l_s, o1_r, o2_r, l_r, w: Optional[LossWeights] = None) -> CombinedLoss:
    """lambda1*Loss1 + lambda2*Loss2 + lambda3*Loss3 and the matching output gradients.

    Loss3 only contributes when both domains are present in the batch.
    """
    w = w or LossWeights()
    if np.size(o2_s) == 0 and np.size(o2_r) == 0:
        raise DataError("combined loss needs at least one non-empty sub-batch")
    t1, g1 = loss1_mse(o2_s, l_s)
    t2, g2 = loss2_binary(o2_r, l_r, w.ot)
    t3, g3s, g3r = loss3_distribution(o1_s, o1_r)
    total = w.lambda1 * t1.value + w.lambda2 * t2.value + w.lambda3 * t3.value
    dt = np.asarray(o2_s).dtype if np.size(o2_s) else np.asarray(o2_r).dtype
    c1, c2, c3 = (dt.type(x) for x in (w.lambda1, w.lambda2, w.lambda3))
    return CombinedLoss(total, t1, t2, t3, c3 * g3s, c1 * g1, c3 * g3r, c2 * g2)
