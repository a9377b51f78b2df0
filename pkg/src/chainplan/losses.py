"""Focal-loss supervision for sub-chain decoders and the complete chain.

The focal loss modulates cross-entropy by (1 - p)^gamma, down-weighting
easy examples; gamma = 0 recovers cross-entropy exactly. The individual
sub-chain term of decoder i touches only positions {1, i+1, T}; the
complete-chain term covers all T positions of the accumulated logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import (
    EngineError,
    Tensor,
    add,
    clip_min,
    log,
    mean,
    mul,
    neg,
    power,
    softmax,
    sub,
    take,
    total,
)
from .model import PlannerOutput, subchain_positions

PROB_CLAMP = 1e-12


class LossError(EngineError):
    pass


class ClampCounter:
    """Counts probability clamps so silent log-of-zero rescues stay visible."""

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


clamp_warnings = ClampCounter()


@dataclass
class LossConfig:
    """gamma is the focal exponent; positions (1-based) restrict the
    complete-chain term to a standalone sub-chain when set."""
    gamma: float = 0.0
    positions: tuple[int, ...] | None = None


@dataclass
class LossBreakdown:
    total: Tensor          # scalar, differentiable
    chain: Tensor          # L_T
    subchains: Tensor | None  # L_N, None when only the complete chain is supervised

    def values(self) -> tuple[float, float, float]:
        l_n = self.subchains.item() if self.subchains is not None else 0.0
        return self.total.item(), l_n, self.chain.item()


def focal_loss(probabilities: Tensor, targets: np.ndarray, gamma: float) -> Tensor:
    """-mean over supervised rows of (1 - p_target)^gamma * log p_target.

    ``probabilities`` must already be valid distributions along the last
    axis, shaped (rows, n_a) or (batch, rows, n_a); ``targets`` holds the
    matching integer labels.
    """
    if gamma < 0:
        raise LossError("gamma must be non-negative")
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != probabilities.shape[:-1]:
        raise LossError(
            f"targets shape {targets.shape} does not match probabilities "
            f"{probabilities.shape}")
    onehot = np.zeros(probabilities.shape, dtype=probabilities.data.dtype)
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    p = total(mul(probabilities, Tensor(onehot)), axis=-1)
    clamp_warnings.count += int((p.data < PROB_CLAMP).sum())
    p = clip_min(p, PROB_CLAMP)
    nll = neg(log(p))
    if gamma == 0:
        return mean(nll)
    weight = power(sub(Tensor(1.0), p), gamma)
    return mean(mul(weight, nll))


def loss_subchains(output: PlannerOutput, targets: np.ndarray,
                   gamma: float) -> Tensor:
    """Sum of the per-decoder focal losses, each on its own 3 positions."""
    horizon = targets.shape[-1]
    chains = subchain_positions(horizon)
    if horizon < 4:
        raise LossError("sub-chain losses need a horizon of at least 4")
    if len(output.per_decoder) != len(chains):
        raise LossError(
            f"expected {len(chains)} decoders for horizon {horizon}, "
            f"got {len(output.per_decoder)}")
    terms = None
    for logits, positions in zip(output.per_decoder, chains):
        rows = [p - 1 for p in positions]
        probs = softmax(take(logits, rows, axis=1), axis=-1)
        term = focal_loss(probs, targets[..., rows], gamma)
        terms = term if terms is None else add(terms, term)
    return terms


def loss_chain(final_logits: Tensor, targets: np.ndarray, gamma: float,
               positions: tuple[int, ...] | None = None) -> Tensor:
    """Focal loss over the final sequence logits (optionally restricted)."""
    if positions is not None:
        rows = [p - 1 for p in positions]
        final_logits = take(final_logits, rows, axis=1)
        targets = targets[..., rows]
    return focal_loss(softmax(final_logits, axis=-1), targets, gamma)


def loss_total(output: PlannerOutput, targets: np.ndarray,
               config: LossConfig, decouple: bool = True) -> LossBreakdown:
    """L = L_N + L_T when decoupled at horizon >= 4, otherwise L_T alone."""
    horizon = targets.shape[-1]
    l_t = loss_chain(output.final, targets, config.gamma, config.positions)
    if decouple and horizon >= 4 and config.positions is None:
        l_n = loss_subchains(output, targets, config.gamma)
        return LossBreakdown(total=add(l_n, l_t), chain=l_t, subchains=l_n)
    return LossBreakdown(total=l_t, chain=l_t, subchains=None)


def state_regression_loss(predicted: Tensor, target_states: np.ndarray) -> Tensor:
    """Mean squared error of the auxiliary state head."""
    diff = sub(predicted, Tensor(np.asarray(target_states)))
    return mean(mul(diff, diff))
