"""Softmax classifiers built on the tape, shared by the model and the refiner."""

from __future__ import annotations

import numpy as np

from .diffmath import Node, ParamSet, Tape, _softmax_rows, as_matrix

LINEAR = "linear"
MLP = "mlp"


def init_params(in_dim: int, n_classes: int, rng: np.random.Generator, *, arch: str = LINEAR,
                hidden: int = 16, std: float = 0.01, role: str = "model") -> ParamSet:
    """Weights ~ N(0, std^2), biases zero."""
    if arch == LINEAR:
        return ParamSet({"W": rng.normal(0.0, std, (in_dim, n_classes)),
                         "b": np.zeros((1, n_classes))}, role)
    if arch == MLP:
        return ParamSet({"W1": rng.normal(0.0, std, (in_dim, hidden)),
                         "b1": np.zeros((1, hidden)),
                         "W2": rng.normal(0.0, std, (hidden, n_classes)),
                         "b2": np.zeros((1, n_classes))}, role)
    raise ValueError(f"unknown architecture {arch!r}")


def arch_of(params: ParamSet) -> str:
    return MLP if "W1" in params.entries else LINEAR


def logits_graph(tape: Tape, nodes: dict[str, Node], x: Node) -> Node:
    if "W1" in nodes:
        h = tape.tanh(tape.add_row(tape.matmul(x, nodes["W1"]), nodes["b1"]))
        return tape.add_row(tape.matmul(h, nodes["W2"]), nodes["b2"])
    return tape.add_row(tape.matmul(x, nodes["W"]), nodes["b"])


def probs_graph(tape: Tape, params: ParamSet, x, prefix: str = "") -> Node:
    """Record softmax(f(x)) with ``params`` as named leaves."""
    xn = x if isinstance(x, Node) else tape.const(x)
    return tape.softmax(logits_graph(tape, tape.params(params, prefix), xn))


def logits(params: ParamSet, x) -> np.ndarray:
    x = as_matrix(x, "inputs")
    if "W1" in params.entries:
        h = np.tanh(x @ params["W1"] + params["b1"])
        return h @ params["W2"] + params["b2"]
    return x @ params["W"] + params["b"]


def predict_proba(params: ParamSet, x) -> np.ndarray:
    return _softmax_rows(logits(params, x))


def log_proba(params: ParamSet, x) -> np.ndarray:
    """log of the clamped softmax, matching the tape's log node exactly."""
    return np.log(np.maximum(predict_proba(params, x), 1e-12))


def cross_entropy_graph(tape: Tape, probs: Node, targets) -> Node:
    """Batch-mean of -t_i . log p_i; ``targets`` may be a constant or a node."""
    t = targets if isinstance(targets, Node) else tape.const(targets)
    return -tape.mean_rows(tape.mul(t, tape.log(probs)))


def cross_entropy(params: ParamSet, x, targets) -> tuple[float, ParamSet]:
    """Soft-label cross-entropy of the classifier and its gradient in ``params``."""
    tape = Tape()
    loss = cross_entropy_graph(tape, probs_graph(tape, params, x), targets)
    return float(loss.value[0, 0]), tape.backward(loss, role=params.role)


def cross_entropy_value(params: ParamSet, x, targets) -> float:
    targets = as_matrix(targets, "targets")
    return float(-np.sum(targets * log_proba(params, x)) / targets.shape[0])
