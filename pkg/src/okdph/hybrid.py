"""Parameter hybridization: Dirichlet mixing weights, hybrid-weight model
(HWM) construction, periodic student/HWM fusion and gradient routing."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import LayoutError, ParamVector, check_same_layout


@dataclass(frozen=True)
class HybridWeights:
    r: np.ndarray
    batch: int = 0

    def __len__(self) -> int:
        return len(self.r)


@dataclass
class HwmState:
    params: ParamVector
    weights: HybridWeights
    source_batch: int


@dataclass(frozen=True)
class FusionPolicy:
    interval: int = 1
    unit: str = "epoch"  # "epoch" or "batch"
    ratio: float = 0.5

    def __post_init__(self):
        if self.interval < 1:
            raise ValueError(f"fusion interval must be >= 1, got {self.interval}")
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError(f"fusion ratio must lie in [0, 1], got {self.ratio}")
        if self.unit not in ("epoch", "batch"):
            raise ValueError(f"fusion unit must be 'epoch' or 'batch', got {self.unit!r}")

    def interval_batches(self, batches_per_epoch: int) -> int:
        return self.interval * batches_per_epoch if self.unit == "epoch" else self.interval


def sample_dirichlet(alpha, rng: np.random.Generator, batch: int = 0) -> HybridWeights:
    """Gamma-method draw: g_m ~ Gamma(alpha_m, 1), r = g / sum(g)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim != 1 or alpha.size == 0 or not np.all(alpha > 0):
        raise ValueError(f"Dirichlet concentration must be a non-empty positive vector, got {alpha}")
    g = rng.standard_gamma(alpha)
    total = g.sum()
    while not total > 0:  # every gamma draw underflowed; only possible for tiny alpha
        g = rng.standard_gamma(alpha)
        total = g.sum()
    return HybridWeights(g / total, batch)


def build_hwm(students: list[ParamVector], weights: HybridWeights, batch: int = 0) -> HwmState:
    """theta_hwm = sum_m r_m * theta_m, summed in student order."""
    if not students:
        raise ValueError("need at least one student")
    if len(weights) != len(students):
        raise ValueError(f"{len(weights)} weights for {len(students)} students")
    check_same_layout(students)
    acc = weights.r[0] * students[0].values
    for r, s in zip(weights.r[1:], students[1:]):
        acc = acc + r * s.values
    return HwmState(ParamVector(acc, students[0].layout), weights, batch)


def fuse(student: ParamVector, hwm: ParamVector, ratio: float) -> ParamVector:
    if student.layout != hwm.layout:
        raise LayoutError("student and HWM layouts differ")
    return ParamVector(ratio * hwm.values + (1.0 - ratio) * student.values, student.layout)


def fuse_students(students: list[ParamVector], hwm: HwmState, policy: FusionPolicy, t: int,
                  batches_per_epoch: int = 1) -> tuple[list[ParamVector], bool]:
    """Pull every student toward the HWM when the global batch counter ``t``
    hits a multiple of the fusion interval."""
    if t < 1:
        raise ValueError(f"batch counter starts at 1, got {t}")
    if t % policy.interval_batches(batches_per_epoch):
        return list(students), False
    return [fuse(s, hwm.params, policy.ratio) for s in students], True


def route_hwm_gradient(grad_at_hwm: ParamVector, weights: HybridWeights,
                       mode: str = "chain") -> list[ParamVector]:
    """Split dL/dtheta_hwm into per-student contributions.

    ``chain`` gives student m the exact chain-rule share r_m * grad;
    ``full`` hands every student the unscaled gradient.
    """
    if mode == "chain":
        return [ParamVector(r * grad_at_hwm.values, grad_at_hwm.layout) for r in weights.r]
    if mode == "full":
        return [grad_at_hwm.copy() for _ in weights.r]
    raise ValueError(f"unknown hwm_grad_mode {mode!r}")
