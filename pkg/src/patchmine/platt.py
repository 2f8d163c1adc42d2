"""Platt calibration of one-class SVM decision values.

A single sigmoid unit ``p = sigmoid(A * G + B)`` is trained with binary
cross-entropy against SVM-derived patch labels, ``+1`` (abnormal) mapping to
target 1.  Any sign convention for ``A`` is absorbed by training; on data
where abnormal patches have the smaller decision values ``A`` comes out
negative.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .tensor import AdamState, adam_step

log = logging.getLogger(__name__)


@dataclass
class PlattModel:
    A: float = 0.0
    B: float = 0.0
    train_loss: list[float] = field(default_factory=list, repr=False)
    val_loss: list[float] = field(default_factory=list, repr=False)

    def probability(self, decision) -> np.ndarray | float:
        return probability(self, decision)


def probability(model: PlattModel, decision) -> np.ndarray | float:
    """``sigmoid(A * decision + B)``."""
    d = np.asarray(decision, dtype=np.float64)
    p = expit(model.A * d + model.B)
    return float(p) if p.ndim == 0 else p


def cross_entropy(A: float, B: float, x: np.ndarray, t: np.ndarray) -> float:
    s = A * x + B
    # log(1 + e^s) - t s, stable for either sign of s
    return float(np.mean(np.logaddexp(0.0, s) - t * s))


def fit_platt(
    decisions,
    labels,
    epochs: int = 25,
    lr: float = 1e-3,
    batch_size: int = 32,
    val_fraction: float = 0.10,
    seed: int = 0,
) -> PlattModel:
    """Fit ``A, B`` from zero with Adam on mini-batches, keeping the best-validation pair.

    The unit sees standardised decisions ``u = (G - mean) / std``; its weights
    are mapped back so the returned pair acts on raw ``G``.  Decision values
    of a one-class SVM are often tiny, and without this a fixed learning rate
    cannot move ``A`` far enough in 25 epochs.

    ``labels`` are patch labels in ``{-1, +1}``.  A random ``val_fraction`` of
    the samples is held out; when that would leave either split empty, the
    training loss is used for model selection instead.
    """
    x = np.asarray(decisions, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if x.shape != y.shape:
        raise ValueError(f"{x.size} decisions but {y.size} labels")
    if not np.all(np.isin(y, (-1, 1))):
        raise ValueError("labels must be -1 or +1")
    if len(np.unique(y)) < 2:
        raise ValueError("Platt calibration needs both labels present")
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    t = (y + 1) / 2.0
    mu, sd = float(x.mean()), float(x.std())
    if not sd > 0:
        sd = 1.0
    u = (x - mu) / sd

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(x))
    n_val = int(round(val_fraction * len(x)))
    if n_val < 1 or len(x) - n_val < 1:
        tr, va = order, order
    else:
        tr, va = order[n_val:], order[:n_val]

    theta = np.zeros(2)
    state = AdamState.zeros_like([theta])
    best = (np.inf, 0.0, 0.0)
    train_hist, val_hist = [], []
    for epoch in range(1, epochs + 1):
        perm = rng.permutation(tr)
        for start in range(0, len(perm), batch_size):
            b = perm[start : start + batch_size]
            err = expit(theta[0] * u[b] + theta[1]) - t[b]
            grad = np.array([np.mean(err * u[b]), np.mean(err)])
            adam_step([theta], [grad], state, lr=lr)
        train_hist.append(cross_entropy(theta[0], theta[1], u[tr], t[tr]))
        val_hist.append(cross_entropy(theta[0], theta[1], u[va], t[va]))
        if val_hist[-1] < best[0]:
            best = (val_hist[-1], float(theta[0]), float(theta[1]))
        log.info("phase=platt epoch=%d train_ce=%.6f val_ce=%.6f", epoch, train_hist[-1], val_hist[-1])
    a, b = best[1], best[2]
    return PlattModel(a / sd, b - a * mu / sd, train_hist, val_hist)
