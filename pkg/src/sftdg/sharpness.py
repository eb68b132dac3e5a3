"""Sharpness-aware perturbations, SAM losses and per-domain sharpness.

The perturbation is the normalised gradient scaled to radius ``rho``. It is
always treated as a constant: gradients of the SAM loss are taken at the
perturbed point, and gradients of the sharpness with respect to the soft
labels (and so the refiner) ignore how the perturbation depends on them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import network
from .diffmath import Node, ParamSet, Tape
from .domains import one_hot

ZERO_GRAD_TOL = 1e-12

LossFn = Callable[[ParamSet], "tuple[float, ParamSet]"]


class DegenerateGradientError(ArithmeticError):
    pass


@dataclass(frozen=True)
class SharpnessConfig:
    rho: float
    zero_grad_policy: str = "zero"

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if self.zero_grad_policy not in ("zero", "error"):
            raise ValueError(f"zero_grad_policy must be 'zero' or 'error', got {self.zero_grad_policy!r}")


@dataclass(frozen=True)
class SharpnessReport:
    base_loss: float
    perturbed_loss: float
    sharpness: float
    grad_norm: float
    perturbation: ParamSet = field(repr=False)
    # per-sample log-probabilities at theta and theta + eps; constants for phi-gradients
    log_probs_base: np.ndarray | None = field(default=None, repr=False)
    log_probs_perturbed: np.ndarray | None = field(default=None, repr=False)
    node: Node | None = field(default=None, repr=False, compare=False)


@dataclass(frozen=True)
class FeedbackSignal:
    value: float
    report_d: SharpnessReport
    report_dp: SharpnessReport
    node: Node | None = field(default=None, repr=False, compare=False)


def sam_perturbation(params: ParamSet, grads: ParamSet, rho: float,
                     zero_grad_policy: str = "zero") -> ParamSet:
    """rho * g / ||g|| over the flattened parameters."""
    params.check_like(grads, "gradient")
    norm = grads.norm()
    if norm < ZERO_GRAD_TOL:
        if zero_grad_policy == "error":
            raise DegenerateGradientError(f"gradient norm {norm:.3e} below {ZERO_GRAD_TOL}")
        return ParamSet.zeros_like(grads)
    return grads.map(lambda g: (rho / norm) * g)


def _targets(params: ParamSet, x, labels) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 1 and np.issubdtype(labels.dtype, np.integer):
        return one_hot(labels, network.logits(params, np.asarray(x)[:1]).shape[1])
    return np.asarray(labels, dtype=np.float64)


def sam_objective(loss_fn: LossFn, params: ParamSet, rho: float,
                  zero_grad_policy: str = "zero") -> tuple[float, ParamSet, ParamSet]:
    """Loss at theta + eps and its gradient there, for any differentiable ``loss_fn``.

    Returns ``(perturbed_loss, grad_at_perturbed, eps)``.
    """
    _, g = loss_fn(params)
    eps = sam_perturbation(params, g, rho, zero_grad_policy)
    loss, g_pert = loss_fn(params.add(eps))
    return loss, g_pert, eps


def sam_loss(params: ParamSet, x, labels_or_soft, rho: float,
             zero_grad_policy: str = "zero") -> tuple[float, ParamSet]:
    """SAM cross-entropy for one-hot labels or soft-label rows."""
    targets = _targets(params, x, labels_or_soft)
    loss, grads, _ = sam_objective(lambda p: network.cross_entropy(p, x, targets), params, rho,
                                   zero_grad_policy)
    return loss, grads


def sharpness_of(loss_fn: LossFn, params: ParamSet, rho: float,
                 zero_grad_policy: str = "zero") -> SharpnessReport:
    """L(theta + eps) - L(theta) with eps from the gradient at theta."""
    base, g = loss_fn(params)
    eps = sam_perturbation(params, g, rho, zero_grad_policy)
    pert, _ = loss_fn(params.add(eps))
    return SharpnessReport(base, pert, pert - base, g.norm(), eps)


def sharpness_graph(tape: Tape, soft: Node, report: SharpnessReport) -> Node:
    """Record the sharpness as a function of the soft labels on ``tape``.

    Equals batch-mean of y~_i . (log f(theta) - log f(theta + eps)) with both
    log-probability matrices held constant.
    """
    diff = tape.const(report.log_probs_base - report.log_probs_perturbed)
    return tape.mean_rows(tape.mul(soft, diff))


def sharpness_measure(params: ParamSet, x, soft_labels, rho: float,
                      zero_grad_policy: str = "zero") -> SharpnessReport:
    """Soft-label cross-entropy sharpness on a batch.

    ``soft_labels`` may be an array, integer labels (one-hot), or a tape node
    (e.g. refiner outputs); in the last case the report carries a node that
    is differentiable with respect to whatever produced the labels.
    """
    soft_node = soft_labels if isinstance(soft_labels, Node) else None
    targets = soft_node.value if soft_node is not None else _targets(params, x, soft_labels)
    base, g = network.cross_entropy(params, x, targets)
    eps = sam_perturbation(params, g, rho, zero_grad_policy)
    perturbed = params.add(eps)
    lp_base = network.log_proba(params, x)
    lp_pert = network.log_proba(perturbed, x)
    pert = float(-np.sum(targets * lp_pert) / targets.shape[0])
    node = sharpness_graph(soft_node.tape, soft_node,
                           SharpnessReport(0, 0, 0, 0, eps, lp_base, lp_pert)) if soft_node else None
    return SharpnessReport(base, pert, pert - base, g.norm(), eps, lp_base, lp_pert, node)


def feedback_signal(params: ParamSet, x_d, x_dp, soft_d, soft_dp, rho: float,
                    zero_grad_policy: str = "zero") -> FeedbackSignal:
    """|sharpness on D_d - sharpness on D_d'|, with a tape node when labels are nodes."""
    rep_d = sharpness_measure(params, x_d, soft_d, rho, zero_grad_policy)
    rep_dp = sharpness_measure(params, x_dp, soft_dp, rho, zero_grad_policy)
    node = None
    if rep_d.node is not None and rep_dp.node is not None:
        node = rep_d.node.tape.abs(rep_d.node - rep_dp.node)
    return FeedbackSignal(abs(rep_d.sharpness - rep_dp.sharpness), rep_d, rep_dp, node)
