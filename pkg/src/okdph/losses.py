"""Loss arithmetic on raw logits.

Every loss is a batch mean and returns its gradient with respect to the
logits it was given, ready to be passed to :func:`okdph.nn.backward`.
Distillation targets are constants: no gradient is returned for them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def log_softmax(z: np.ndarray) -> np.ndarray:
    s = z - z.max(axis=1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def _as_logits(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] == 0:
        raise ValueError(f"logits must be a non-empty (B, C) array, got shape {z.shape}")
    return z


def cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    """Mean of -log softmax(z)[y]; gradient is (softmax(z) - onehot(y)) / B."""
    z = _as_logits(logits)
    y = np.asarray(labels)
    b, c = z.shape
    if y.shape != (b,):
        raise ValueError(f"labels shape {y.shape} does not match batch size {b}")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range [{y.min()}, {y.max()}]")
    lp = log_softmax(z)
    rows = np.arange(b)
    loss = -lp[rows, y].mean()
    grad = np.exp(lp)
    grad[rows, y] -= 1.0
    return float(loss), grad / b


@dataclass
class SoftDistribution:
    probs: np.ndarray
    log_probs: np.ndarray
    tau: float


def soften(logits, tau: float) -> SoftDistribution:
    """Row-wise softmax of z / tau."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    lp = log_softmax(_as_logits(logits) / tau)
    return SoftDistribution(np.exp(lp), lp, float(tau))


def kl_with_temperature(p_student: SoftDistribution, p_target: SoftDistribution,
                        tau: float) -> tuple[float, np.ndarray]:
    """tau^2 * mean_b sum_c p_target log(p_target / p_student).

    Returns the loss and its gradient at the student's logits,
    tau * (p_student - p_target) / B.
    """
    if p_student.tau != tau or p_target.tau != tau:
        raise ValueError(
            f"temperature mismatch: student {p_student.tau}, target {p_target.tau}, loss {tau}")
    if p_student.probs.shape != p_target.probs.shape:
        raise ValueError("student and target distributions differ in shape")
    b = p_student.probs.shape[0]
    pt = p_target.probs
    terms = np.where(pt > 0, pt * (p_target.log_probs - p_student.log_probs), 0.0)
    loss = tau * tau * terms.sum(axis=1).mean()
    grad = tau * (p_student.probs - pt) / b
    return float(loss), grad


def ensemble_logits(student_logits: list, hwm_logits) -> np.ndarray:
    """Elementwise mean of the M student logits and the HWM logits."""
    parts = [_as_logits(z) for z in student_logits] + [_as_logits(hwm_logits)]
    if not student_logits:
        raise ValueError("need at least one student")
    for z in parts[1:]:
        if z.shape != parts[0].shape:
            raise ValueError(f"logit shapes differ: {parts[0].shape} vs {z.shape}")
    acc = parts[0].copy()
    for z in parts[1:]:
        acc += z
    return acc / len(parts)


@dataclass
class LossBreakdown:
    ce_student: float
    ce_hwm: float
    kd: float
    total: float
    omega: float
    beta: float


def total_student_loss(z_m, z_hwm, z_en, labels, omega: float, beta: float, tau: float):
    """omega * CE(z_m) + (1 - omega) * CE(z_hwm) + beta * KD(z_m -> z_en).

    Returns ``(LossBreakdown, grad_at_z_m, grad_at_z_hwm)``. The HWM gradient
    carries only the (1 - omega) CE term; ``z_en`` is treated as a constant.
    """
    if not 0.0 <= omega <= 1.0:
        raise ValueError(f"omega must lie in [0, 1], got {omega}")
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    ce_m, g_m = cross_entropy(z_m, labels)
    ce_h, g_h = cross_entropy(z_hwm, labels)
    kd, g_kd = kl_with_temperature(soften(z_m, tau), soften(z_en, tau), tau)
    total = omega * ce_m + (1.0 - omega) * ce_h + beta * kd
    grad_m = omega * g_m + beta * g_kd
    grad_h = (1.0 - omega) * g_h
    return LossBreakdown(ce_m, ce_h, kd, total, omega, beta), grad_m, grad_h
