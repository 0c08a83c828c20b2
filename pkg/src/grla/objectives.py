"""Losses and schedules for adversarial domain adaptation.

The classification loss is computed on source-domain rows only: rows with
domain label 1 are excluded by index selection before any arithmetic, so
target class labels cannot influence the value or the gradient. The domain
loss is a numerically stable binary cross-entropy on raw logits. The total
is their unweighted sum; the adversarial strength lambda acts only inside
the gradient reversal layer, never as a loss coefficient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "LossBreakdown",
    "masked_cross_entropy",
    "domain_bce",
    "total_loss",
    "LAMBDA_KINDS",
    "lambda_value",
    "lr_value",
]

_CLAMP_FLOOR = 1e-12


@dataclass
class LossBreakdown:
    """Scalar tensors for the combined objective plus bookkeeping counts."""

    total: Tensor
    class_loss: Tensor
    domain_loss: Tensor
    n_source: int
    n_target: int
    clamp_events: int


def _check_labels(name, arr, n, allowed_max):
    arr = np.asarray(arr)
    if arr.shape != (n,):
        raise T.ShapeError(f"{name}: expected shape ({n},), got {arr.shape}")
    if arr.size and (not np.issubdtype(arr.dtype, np.integer)):
        if not np.all(arr == arr.astype(np.int64)):
            raise ValueError(f"{name}: labels must be integers")
    ints = arr.astype(np.int64)
    if ints.size and (ints.min() < 0 or ints.max() > allowed_max):
        raise ValueError(f"{name}: labels must lie in [0, {allowed_max}], got range "
                         f"[{ints.min()}, {ints.max()}]")
    return ints


def masked_cross_entropy(class_probs, labels, domains, weights=None):
    """Source-only weighted cross-entropy.

    L = (1 / N_s) * sum_{i: d_i=0} w_i * (-log p_{i, y_i}) with
    N_s = sum_i (1 - d_i). Returns (loss, n_source, clamp_events); the loss is
    a detached exact 0.0 scalar when the batch has no source rows.
    """
    if not isinstance(class_probs, Tensor):
        class_probs = Tensor(np.asarray(class_probs))
    if class_probs.ndim != 2:
        raise T.ShapeError(f"class_probs must be (N, C), got {tuple(class_probs.shape)}")
    n, c = class_probs.shape
    labels = _check_labels("labels", labels, n, c - 1)
    domains = _check_labels("domains", domains, n, 1)
    if weights is None:
        weights = np.ones(n, dtype=class_probs.dtype)
    else:
        weights = np.asarray(weights, dtype=class_probs.dtype)
        if weights.shape != (n,):
            raise T.ShapeError(f"weights: expected shape ({n},), got {weights.shape}")

    src_idx = np.flatnonzero(domains == 0)
    n_source = int(src_idx.size)
    if n_source == 0:
        zero = Tensor(np.asarray(0.0, dtype=class_probs.dtype))
        return zero, 0, 0

    src_probs = T.gather_rows(class_probs, src_idx)          # (N_s, C)
    picked = T.gather_cols(src_probs, labels[src_idx])        # (N_s,)
    clamp_events = int(np.count_nonzero(picked.data < _CLAMP_FLOOR))
    neg_log = -T.log(T.clamp_min(picked, _CLAMP_FLOOR))
    w = Tensor(weights[src_idx])
    loss = T.reduce_sum(neg_log * w) / float(n_source)
    return loss, n_source, clamp_events


def domain_bce(domain_logits, domains):
    """Mean binary cross-entropy on logits over the whole batch.

    Uses max(z, 0) - z*d + log(1 + exp(-|z|)) so large logits cannot
    overflow. Returns the scalar loss tensor.
    """
    if not isinstance(domain_logits, Tensor):
        domain_logits = Tensor(np.asarray(domain_logits))
    if domain_logits.ndim == 2 and domain_logits.shape[1] == 1:
        z = T.reshape(domain_logits, (-1,))
    elif domain_logits.ndim == 1:
        z = domain_logits
    else:
        raise T.ShapeError(
            f"domain_logits must be (N, 1) or (N,), got {tuple(domain_logits.shape)}"
        )
    n = z.shape[0]
    d = _check_labels("domains", domains, n, 1).astype(z.dtype)
    dt = Tensor(d)
    per_row = T.clamp_min(z, 0.0) - z * dt + T.log1p_exp_neg_abs(z)
    return T.reduce_mean(per_row)


def total_loss(class_probs, domain_logits, labels, domains, weights=None):
    """Combined objective: class term plus domain term, unweighted sum."""
    domains_arr = np.asarray(domains)
    cls, n_source, clamp_events = masked_cross_entropy(class_probs, labels, domains, weights)
    dom = domain_bce(domain_logits, domains)
    total = cls + dom
    n = domains_arr.shape[0]
    return LossBreakdown(
        total=total,
        class_loss=cls,
        domain_loss=dom,
        n_source=n_source,
        n_target=int(n - n_source),
        clamp_events=clamp_events,
    )


LAMBDA_KINDS = (
    "parabolic_up",
    "linear_up",
    "linear_down",
    "parabolic_down",
    "constant_half",
    "logistic",
    "constant_zero",
)


def lambda_value(kind, p):
    """Adversarial-strength schedule evaluated at training progress p in [0, 1]."""
    if not (isinstance(p, (int, float)) and math.isfinite(p)) or not 0.0 <= p <= 1.0:
        raise ValueError(f"progress p must be a finite number in [0, 1], got {p!r}")
    p = float(p)
    if kind == "parabolic_up":
        return p * p
    if kind == "linear_up":
        return p
    if kind == "linear_down":
        return 1.0 - p
    if kind == "parabolic_down":
        return 1.0 - p * p
    if kind == "constant_half":
        return 0.5
    if kind == "logistic":
        return 2.0 / (1.0 + math.exp(-10.0 * p)) - 1.0
    if kind == "constant_zero":
        return 0.0
    raise ValueError(f"unknown lambda schedule {kind!r}; choose one of {LAMBDA_KINDS}")


def lr_value(base_lr, epoch, total_epochs):
    """Linear decay: base_lr * (1 - epoch / total_epochs)."""
    if total_epochs < 1:
        raise ValueError(f"total_epochs must be >= 1, got {total_epochs}")
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch must lie in [0, {total_epochs}], got {epoch}")
    return base_lr * (1.0 - epoch / total_epochs)
