"""Kernel two-sample statistics and adaptation-factor schedules.

MMD^2 is the biased V-statistic under a sum of Gaussian kernels whose base
bandwidth comes from the median heuristic over the pooled batch (treated
as a constant under differentiation).  The cross term is summed in sorted
order so mmd2(X, Y) == mmd2(Y, X) holds bitwise.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor, as_tensor
from .model import ForwardOutput


class DivergenceError(ValueError):
    """Batches too small or shape-mismatched for the estimator."""


DEFAULT_MULTIPLIERS = (0.25, 0.5, 1.0, 2.0, 4.0)


@dataclass(frozen=True)
class KernelBank:
    """Gaussian kernel family: bandwidths = multipliers * base.

    ``base_bandwidth`` is the squared base scale sigma^2.  When None it is
    resolved per call from the median of pooled pairwise squared distances.
    """

    multipliers: tuple[float, ...] = DEFAULT_MULTIPLIERS
    base_bandwidth: float | None = None

    def __post_init__(self):
        if len(self.multipliers) < 1 or any(m <= 0 for m in self.multipliers):
            raise DivergenceError("kernel multipliers must be positive")
        if self.base_bandwidth is not None and self.base_bandwidth <= 0:
            raise DivergenceError("base bandwidth must be positive")

    def resolve(self, x: np.ndarray, y: np.ndarray) -> "KernelBank":
        """Fix the base bandwidth by the median heuristic on pooled data."""
        if self.base_bandwidth is not None:
            return self
        pooled = np.concatenate([x, y], axis=0)
        d2 = _sq_dists_np(pooled, pooled)
        off_diag = d2[~np.eye(len(pooled), dtype=bool)]
        positive = off_diag[off_diag > 0]
        base = float(np.median(positive)) if positive.size else 1.0
        return KernelBank(self.multipliers, base if base > 0 else 1.0)


def _sq_dists_np(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    xx = (x * x).sum(axis=1, keepdims=True)
    yy = (y * y).sum(axis=1, keepdims=True)
    return np.maximum(xx + yy.T - 2.0 * (x @ y.T), 0.0)


def _sq_dists(x: Tensor, y: Tensor) -> Tensor:
    xx = (x * x).sum(axis=1, keepdims=True)
    yy = (y * y).sum(axis=1, keepdims=True)
    return xx + yy.reshape((1, -1)) - (x @ y.transpose(1, 0)) * 2.0


def _kernel_sum(d2: Tensor, bank: KernelBank) -> Tensor:
    total = None
    for m in bank.multipliers:
        term = ag.exp(d2 * (-1.0 / (2.0 * m * bank.base_bandwidth)))
        total = term if total is None else total + term
    return total


def mmd2(x, y, bank: KernelBank = KernelBank()) -> Tensor:
    """Biased multi-kernel MMD^2 between two equal-width sample batches."""
    x, y = as_tensor(x), as_tensor(y)
    if x.shape[0] < 2 or y.shape[0] < 2:
        raise DivergenceError("MMD needs at least 2 samples per batch")
    if x.shape[1] != y.shape[1]:
        raise DivergenceError("MMD batches must share a dimension")
    bank = bank.resolve(x.data, y.data)
    k_xx = ag.sorted_mean(_kernel_sum(_sq_dists(x, x), bank))
    k_yy = ag.sorted_mean(_kernel_sum(_sq_dists(y, y), bank))
    k_xy = ag.sorted_mean(_kernel_sum(_sq_dists(x, y), bank))
    return k_xx + k_yy - k_xy * 2.0


def mkmmd_layerwise(src: ForwardOutput | list, tgt: ForwardOutput | list,
                    bank: KernelBank = KernelBank()) -> Tensor:
    """Sum of per-layer MMD^2 terms over pooled layer embeddings."""
    src_layers = src.layer_embeddings if isinstance(src, ForwardOutput) else list(src)
    tgt_layers = tgt.layer_embeddings if isinstance(tgt, ForwardOutput) else list(tgt)
    banks = bank if isinstance(bank, (list, tuple)) else [bank] * len(src_layers)
    if len(src_layers) != len(tgt_layers) or len(banks) != len(src_layers):
        raise DivergenceError("layer counts differ between source and target")
    total = None
    for s, t, b in zip(src_layers, tgt_layers, banks):
        term = mmd2(s, t, b)
        total = term if total is None else total + term
    return total


def mmd_over_logits(src_logits, tgt_logits, bank: KernelBank = KernelBank()) -> Tensor:
    """MMD^2 over mean-pooled per-sequence logit vectors."""
    return mmd2(_pool_if_3d(src_logits), _pool_if_3d(tgt_logits), bank)


def _pool_if_3d(t) -> Tensor:
    t = as_tensor(t)
    return t.mean(axis=1) if t.ndim == 3 else t


def coral(x, y) -> Tensor:
    """Frobenius gap between sample covariances, scaled by 1/(4 d^2)."""
    x, y = as_tensor(x), as_tensor(y)
    if x.shape[0] < 2 or y.shape[0] < 2:
        raise DivergenceError("CORAL needs at least 2 samples per batch")
    if x.shape[1] != y.shape[1]:
        raise DivergenceError("CORAL batches must share a dimension")
    d = x.shape[1]
    diff = _covariance(x) - _covariance(y)
    return (diff * diff).sum() * (1.0 / (4.0 * d * d))


def _covariance(x: Tensor) -> Tensor:
    n = x.shape[0]
    centered = x - x.mean(axis=0, keepdims=True)
    return (centered.transpose(1, 0) @ centered) * (1.0 / (n - 1))


# ---------------------------------------------------------------- schedules

@dataclass(frozen=True)
class LambdaSchedule:
    """Adaptation factor over training steps: linear, sigmoid or fixed."""

    kind: str = "linear"        # linear | sigmoid | fixed
    total_steps: int = 1
    value: float = 0.5          # fixed kind only
    gamma: float = 10.0         # sigmoid steepness

    def __post_init__(self):
        if self.kind not in ("linear", "sigmoid", "fixed"):
            raise DivergenceError(f"unknown lambda schedule {self.kind!r}")
        if self.total_steps < 1:
            raise DivergenceError("schedule needs at least one step")
        if not 0.0 <= self.value <= 1.0:
            raise DivergenceError("fixed lambda must lie in [0, 1]")


def lambda_at(schedule: LambdaSchedule, step: int) -> float:
    """lambda(step) in [0, 1]; linear and sigmoid ramp 0 -> ~1."""
    if not 0 <= step <= schedule.total_steps:
        raise DivergenceError(
            f"step {step} outside [0, {schedule.total_steps}]")
    if schedule.kind == "fixed":
        return schedule.value
    progress = step / schedule.total_steps
    if schedule.kind == "linear":
        return progress
    return 2.0 / (1.0 + math.exp(-schedule.gamma * progress)) - 1.0
