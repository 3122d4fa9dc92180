"""Debiased pseudo-labeling: counterfactual logit correction against a
momentum estimate of the prediction marginal, adaptive per-class margins, and
the DA / LA baselines it is compared against."""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .numkit import argmax_rows, log_softmax_rows, softmax_rows

P_FLOOR = 1e-9


def floor_simplex(p, eps: float = P_FLOOR) -> np.ndarray:
    """Renormalise ``p`` and lift entries below ``eps`` up to ``eps``.

    The lifted mass is taken from the other entries in proportion to their
    excess over ``eps``, so the output sums to 1 with every entry >= ``eps``.
    Vectors already above the floor are only renormalised.
    """
    q = np.asarray(p, dtype=np.float64)
    q = np.maximum(q, 0.0) / np.maximum(q, 0.0).sum()
    low = q < eps
    if not low.any():
        return q
    if low.all() or eps * q.size >= 1:
        return np.full(q.size, 1.0 / q.size)
    need = float((eps - q[low]).sum())
    room = q[~low] - eps
    q = q.copy()
    q[low] = eps
    q[~low] -= need * room / room.sum()
    return q


@dataclass(frozen=True)
class DebiasState:
    """Running marginal ``p_hat`` plus the coefficients that act on it.

    ``lambda_debias`` scales the logit correction used for pseudo-labeling;
    ``lambda_margin`` scales the margins of the unsupervised loss.
    """

    p_hat: np.ndarray
    momentum: float = 0.999
    lambda_debias: float = 0.5
    lambda_margin: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.lambda_debias < 0 or self.lambda_margin < 0:
            raise ValueError("debias coefficients must be non-negative")

    @classmethod
    def uniform(cls, num_classes: int, momentum: float = 0.999, lam: float = 0.5,
                lambda_debias: float | None = None, lambda_margin: float | None = None) -> "DebiasState":
        return cls(np.full(num_classes, 1.0 / num_classes), momentum,
                   lam if lambda_debias is None else lambda_debias,
                   lam if lambda_margin is None else lambda_margin)

    @property
    def num_classes(self) -> int:
        return self.p_hat.shape[0]


def _check_p_hat(p_hat: np.ndarray) -> None:
    if np.any(p_hat <= 0):
        raise AssertionError("p_hat has a non-positive entry; floor_simplex was bypassed")


def debias_logits(logits, state: DebiasState) -> np.ndarray:
    """``logits - lambda_debias * log(p_hat)``, broadcast over rows."""
    z = np.asarray(logits, dtype=np.float64)
    if state.lambda_debias == 0:
        return z.copy()
    _check_p_hat(state.p_hat)
    return z - state.lambda_debias * np.log(state.p_hat)


def update_p_hat(state: DebiasState, batch_probs) -> DebiasState:
    """Momentum update of ``p_hat`` toward the mean row of ``batch_probs``.

    Every row counts, confident or not. An empty batch leaves the state as is.
    """
    probs = np.asarray(batch_probs, dtype=np.float64)
    if probs.ndim == 1:
        probs = probs.reshape(1, -1)
    if probs.shape[0] == 0:
        return state
    m = state.momentum
    new = m * state.p_hat + (1.0 - m) * probs.mean(axis=0)
    return replace(state, p_hat=floor_simplex(new))


@dataclass(frozen=True)
class Margins:
    delta: np.ndarray


def adaptive_margins(state: DebiasState) -> Margins:
    """``delta_j = lambda_margin * log(1 / p_hat_j)``: rarely predicted classes get larger margins."""
    _check_p_hat(state.p_hat)
    return Margins(-state.lambda_margin * np.log(state.p_hat))


def marginal_loss(z, pseudo_label, margins: Margins) -> tuple[float, np.ndarray] | tuple[np.ndarray, np.ndarray]:
    """Cross-entropy on margin-shifted logits ``z - delta``.

    For a single logit vector returns ``(loss, grad)``; for a matrix of rows
    and a label vector returns per-row losses and the per-row gradients.
    The gradient w.r.t. ``z`` is ``softmax(z - delta) - onehot(label)``.
    """
    z = np.asarray(z, dtype=np.float64)
    shifted = z - margins.delta
    logp = log_softmax_rows(shifted)
    if z.ndim == 1:
        y = int(pseudo_label)
        grad = np.exp(logp)
        grad[y] -= 1.0
        return float(-logp[y]), grad
    y = np.asarray(pseudo_label, dtype=np.int64)
    rows = np.arange(z.shape[0])
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    return -logp[rows, y], grad


def pseudo_label(debiased_probs, tau: float):
    """Argmax label and acceptance flag (``max prob >= tau``).

    Works on a single probability vector or row-wise on a matrix.
    """
    p = np.asarray(debiased_probs, dtype=np.float64)
    labels = argmax_rows(p)
    accepted = p.reshape(-1, p.shape[-1]).max(axis=1) >= tau
    if p.ndim == 1:
        return int(labels[0]), bool(accepted[0])
    return labels, accepted


def distribution_alignment(probs, target, p_hat, eps: float = P_FLOOR) -> np.ndarray:
    """Rescale ``probs`` by ``target / p_hat`` and renormalise each row."""
    p = np.asarray(probs, dtype=np.float64)
    ratio = np.asarray(target, dtype=np.float64) / np.maximum(np.asarray(p_hat, dtype=np.float64), eps)
    out = p * ratio
    return out / out.sum(axis=-1, keepdims=True)


def logit_adjust(logits, prior, tau_la: float = 1.0) -> np.ndarray:
    """Post-hoc logit adjustment ``z - tau_la * log(prior)`` with a fixed class prior."""
    prior = np.asarray(prior, dtype=np.float64)
    if np.any(prior <= 0):
        raise ValueError("logit adjustment needs a strictly positive prior")
    return np.asarray(logits, dtype=np.float64) - tau_la * np.log(prior)


def debiased_probs(logits, state: DebiasState) -> np.ndarray:
    return softmax_rows(debias_logits(logits, state))


def write_p_hat_trajectory(rows, path) -> None:
    """``rows`` is an iterable of ``(step, p_hat)``; writes ``step,p_0..p_{C-1}``."""
    rows = list(rows)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        C = len(rows[0][1]) if rows else 0
        w.writerow(["step"] + [f"p_{j}" for j in range(C)])
        for step, p in rows:
            w.writerow([int(step)] + [repr(float(v)) for v in p])
