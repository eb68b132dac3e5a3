"""Exact KL projection onto the ratio-constrained label space.

For a true class ``k`` and ratio ``alpha >= 1`` the label space is

    C_k = {q on the simplex : q_k >= alpha * q_j for every j != k}.

:func:`project` returns argmin_{q in C_k} KL(q || p) with an active-set
sweep over the classes whose scaled probability exceeds ``p_k``. Two
independent solvers back it up for testing and benchmarking: exhaustive
enumeration of candidate tight sets, and a bound-constrained dual solve.
"""

from __future__ import annotations

import functools
import itertools
import json
import time
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .diffmath import Node, Tape

PROB_FLOOR = 1e-12
SIMPLEX_TOL = 1e-9
MAX_ENUM_CLASSES = 12


class ProjectionInputError(ValueError):
    pass


@dataclass(frozen=True)
class LabelSpaceConstraint:
    true_class: int
    alpha: float
    n_classes: int

    def __post_init__(self):
        if not self.alpha >= 1.0:
            raise ProjectionInputError(f"alpha must be >= 1, got {self.alpha}")
        if not 0 <= self.true_class < self.n_classes:
            raise ProjectionInputError(f"true class {self.true_class} outside [0, {self.n_classes})")


@dataclass(frozen=True)
class ProjectionResult:
    q_star: np.ndarray
    active_set: frozenset
    kl_value: float
    iterations: int = 0


def kl_divergence(q, p) -> float:
    """KL(q || p) with 0 log 0 = 0 and p clamped at the probability floor."""
    q = np.asarray(q, dtype=np.float64)
    p = np.maximum(np.asarray(p, dtype=np.float64), PROB_FLOOR)
    mask = q > 0
    return float(np.sum(q[mask] * (np.log(q[mask]) - np.log(p[mask]))))


def _check_simplex(p, n_classes: int) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64).ravel()
    if p.size != n_classes:
        raise ProjectionInputError(f"expected {n_classes} probabilities, got {p.size}")
    if not np.all(np.isfinite(p)) or p.min() < -SIMPLEX_TOL or abs(p.sum() - 1.0) > SIMPLEX_TOL:
        raise ProjectionInputError(f"not a probability vector: {p}")
    return p


def _swap(v: np.ndarray, k: int) -> np.ndarray:
    out = v.copy()
    out[0], out[k] = v[k], v[0]
    return out


def _project_first(p: np.ndarray, alpha: float):
    """Active-set sweep for true class 0; returns (q, active indices, iterations)."""
    pc = np.maximum(p, PROB_FLOOR)
    log_p1 = float(np.log(pc[0]))
    log_alpha = float(np.log(alpha))
    # B: classes whose scaled mass beats the true class, largest first, ties by index
    cand = np.flatnonzero(alpha * pc[1:] > pc[0]) + 1
    if cand.size == 0:
        q = np.maximum(p, 0.0)
        return q / q.sum(), [], 0
    cand = cand[np.argsort(-pc[cand], kind="stable")].tolist()
    log_ap = (log_alpha + np.log(pc[cand])).tolist()

    active = [cand[0]]
    acc = alpha * log_p1 + log_ap[0]
    iterations = 1
    t = 1
    while t < len(cand):
        log_geo = acc / (len(active) + alpha)
        iterations += 1
        if log_geo < log_ap[t]:
            active.append(cand[t])
            acc += log_ap[t]
            t += 1
        else:
            break
    log_q1 = acc / (len(active) + alpha)

    # unnormalised q_i = p_i off the active set; shift by the max before exp
    log_q = np.log(pc)
    log_q[0] = log_q1
    log_q[active] = log_q1 - log_alpha
    log_q -= log_q.max()
    q = np.exp(log_q)
    return q / q.sum(), active, iterations


def project(p, constraint: LabelSpaceConstraint) -> ProjectionResult:
    """Minimise KL(q || p) over the label space of ``constraint``."""
    p = _check_simplex(p, constraint.n_classes)
    k = constraint.true_class
    q, active, iters = _project_first(_swap(p, k), constraint.alpha)
    q = _swap(q, k)
    # undo the swap on reported indices: slot 0 held class k, slot k held class 0
    active = frozenset(k if j == 0 else (0 if j == k else j) for j in active)
    return ProjectionResult(q, active, kl_divergence(q, p), iters)


def project_batch(probs, labels, alpha: float) -> np.ndarray:
    """Row-wise :func:`project` on an (n, N) matrix, vectorised over rows.

    Each row's sweep is evaluated for every prefix length at once; the
    active set is the longest prefix whose membership tests all pass, which
    is the stopping rule of the sequential sweep.
    """
    P = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).ravel()
    n, N = P.shape
    if labels.shape[0] != n:
        raise ProjectionInputError("one label per row required")
    if not alpha >= 1.0:
        raise ProjectionInputError(f"alpha must be >= 1, got {alpha}")
    if np.any(np.abs(P.sum(axis=1) - 1.0) > SIMPLEX_TOL) or P.min() < -SIMPLEX_TOL:
        raise ProjectionInputError("rows must be probability vectors")
    if N == 1:
        return np.ones_like(P)
    rows = np.arange(n)
    pc = np.maximum(P, PROB_FLOOR)
    p_true = pc[rows, labels]
    others = pc.copy()
    others[rows, labels] = -np.inf
    # stable descending sort keeps lowest index first among ties
    order = np.argsort(-others, axis=1, kind="stable")[:, : N - 1]
    sorted_p = np.take_along_axis(pc, order, axis=1)
    in_b = alpha * sorted_p > p_true[:, None]
    log_alpha = np.log(alpha)
    log_ap = log_alpha + np.log(sorted_p)
    sizes = np.arange(1, N)
    log_geo = (alpha * np.log(p_true)[:, None] + np.cumsum(log_ap, axis=1)) / (sizes + alpha)
    # prefix of length t+1 extends prefix t when candidate t passes against prefix t
    passes = np.ones_like(in_b)
    passes[:, 1:] = log_geo[:, :-1] < log_ap[:, 1:]
    ok = in_b & passes
    n_active = np.where(ok.all(axis=1), N - 1, np.argmin(ok, axis=1))
    has_active = n_active > 0
    log_q1 = log_geo[rows, np.maximum(n_active - 1, 0)]

    log_q = np.log(pc)
    active_mask = sizes[None, :] <= n_active[:, None]
    sorted_log = np.where(active_mask, (log_q1 - log_alpha)[:, None], np.log(sorted_p))
    np.put_along_axis(log_q, order, sorted_log, axis=1)
    log_q[rows, labels] = np.where(has_active, log_q1, np.log(p_true))
    log_q -= log_q.max(axis=1, keepdims=True)
    q = np.exp(log_q)
    q /= q.sum(axis=1, keepdims=True)
    # rows with an empty B pass through unchanged
    passthrough = ~has_active
    if passthrough.any():
        raw = np.maximum(P[passthrough], 0.0)
        q[passthrough] = raw / raw.sum(axis=1, keepdims=True)
    return q


# --------------------------------------------------------------------------
# independent solvers


@functools.lru_cache(maxsize=None)
def _tight_masks(n: int) -> np.ndarray:
    """Every subset of classes 1..n-1 as a boolean (2^(n-1), n-1) matrix."""
    return np.array(list(itertools.product([False, True], repeat=n - 1)), dtype=bool).reshape(-1, n - 1)


def _tight_set_candidates(pc: np.ndarray, alpha: float, masks: np.ndarray) -> np.ndarray:
    """Row r minimises KL(q||p) on the simplex subject to q_0 = alpha q_j for
    every j flagged in ``masks[r]`` (other ratio constraints ignored).

    Stationarity with free multipliers gives q_j proportional to p_j off the
    tight set and log q_0 = (alpha log p_0 + sum_tight log(alpha p_j)) /
    (alpha + |tight|), up to the shared normaliser.
    """
    log_p = np.log(pc)
    log_alpha = np.log(alpha)
    size = masks.sum(axis=1)
    log_q0 = (alpha * log_p[0] + masks @ (log_alpha + log_p[1:])) / (alpha + size)
    log_q0 = np.where(size > 0, log_q0, log_p[0])
    rest = np.where(masks, (log_q0 - log_alpha)[:, None], log_p[None, 1:])
    log_q = np.column_stack([log_q0, rest])
    log_q -= log_q.max(axis=1, keepdims=True)
    q = np.exp(log_q)
    return q / q.sum(axis=1, keepdims=True)


def _oracle_enumerate(p: np.ndarray, alpha: float) -> np.ndarray:
    pc = np.maximum(p, PROB_FLOOR)
    cands = _tight_set_candidates(pc, alpha, _tight_masks(p.size))
    feasible = np.all(cands[:, :1] >= alpha * cands[:, 1:] - 1e-12, axis=1)
    cands = cands[feasible]
    kl = np.sum(np.where(cands > 0, cands * (np.log(np.maximum(cands, 1e-300)) - np.log(pc)), 0.0),
                axis=1)
    return cands[np.argmin(kl)]


def _oracle_dual(p: np.ndarray, alpha: float, tol: float = 1e-13) -> np.ndarray:
    """Maximise the Lagrange dual over multipliers mu >= 0 with L-BFGS-B.

    For fixed mu the inner minimiser is q proportional to
    (p_0 exp(sum mu), p_j exp(-alpha mu_j)); the dual objective is
    -log of its normaliser.
    """
    pc = np.maximum(p, PROB_FLOOR)
    log_p = np.log(pc)

    def logits(mu):
        z = log_p.copy()
        z[0] += mu.sum()
        z[1:] -= alpha * mu
        return z

    def objective(mu):
        z = logits(mu)
        zmax = z.max()
        w = np.exp(z - zmax)
        s = w.sum()
        q = w / s
        grad = q[0] - alpha * q[1:]
        return zmax + np.log(s), grad

    n = p.size - 1
    res = optimize.minimize(objective, np.zeros(n), jac=True, method="L-BFGS-B",
                            bounds=[(0.0, None)] * n,
                            options={"ftol": tol, "gtol": tol, "maxiter": 10_000})
    z = logits(res.x)
    q = np.exp(z - z.max())
    q /= q.sum()
    # feasibility repair: clip violating classes onto their constraint
    q[1:] = np.minimum(q[1:], q[0] / alpha)
    q /= q.sum()
    return q


def oracle_project(p, constraint: LabelSpaceConstraint, method: str = "enumerate") -> np.ndarray:
    """Reference solution, independent of the active-set sweep.

    ``"enumerate"`` tries every candidate tight set (N <= 12) and keeps the
    feasible candidate with least KL. ``"dual"`` runs a bound-constrained
    quasi-Newton solve of the dual problem and is usable for larger N.
    """
    p = _check_simplex(p, constraint.n_classes)
    k = constraint.true_class
    ps = _swap(p, k)
    if method == "enumerate":
        if constraint.n_classes > MAX_ENUM_CLASSES:
            raise ProjectionInputError(
                f"enumeration oracle refuses N={constraint.n_classes} > {MAX_ENUM_CLASSES}")
        q = _oracle_enumerate(ps, constraint.alpha)
    elif method == "dual":
        q = _oracle_dual(ps, constraint.alpha)
    else:
        raise ValueError(f"unknown oracle method {method!r}")
    return _swap(q, k)


# --------------------------------------------------------------------------
# PCE loss


def check_probability_rows(rows, what: str = "rows", tol: float = 1e-6) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.min() < -tol or np.any(np.abs(rows.sum(axis=1) - 1.0) > tol):
        raise ProjectionInputError(f"{what} must be probability vectors")
    return rows


def pce_loss(tape: Tape, refiner_probs: Node, targets) -> Node:
    """Projection cross-entropy, batch-mean of -q*_i . log y~_i.

    ``targets`` are treated as constants; gradients flow into whatever
    produced ``refiner_probs``.
    """
    check_probability_rows(refiner_probs.value, "refiner outputs")
    targets = check_probability_rows(targets, "projection targets")
    if targets.shape != refiner_probs.value.shape:
        raise ProjectionInputError(f"targets {targets.shape} vs outputs {refiner_probs.value.shape}")
    return -tape.mean_rows(tape.mul(tape.const(targets), tape.log(refiner_probs)))


def pce_value(refiner_probs, targets) -> float:
    y = check_probability_rows(refiner_probs, "refiner outputs")
    q = check_probability_rows(targets, "projection targets")
    return float(-np.sum(q * np.log(np.maximum(y, PROB_FLOOR))) / y.shape[0])


# --------------------------------------------------------------------------
# benchmark


def _random_instance(rng: np.random.Generator, n_classes: int):
    p = rng.dirichlet(np.ones(n_classes))
    alpha = float(10 ** rng.uniform(0.0, 2.0))
    k = int(rng.integers(n_classes))
    return p, LabelSpaceConstraint(k, alpha, n_classes)


def benchmark_projection(n_classes: int, trials: int, seed: int = 0) -> dict:
    """Mean wall-clock seconds per call for the sweep and the dual oracle."""
    if n_classes > 200:
        raise ProjectionInputError("benchmark limited to N <= 200")
    rng = np.random.default_rng(seed)
    instances = [_random_instance(rng, n_classes) for _ in range(trials)]
    t0 = time.perf_counter()
    for p, c in instances:
        project(p, c)
    fast = (time.perf_counter() - t0) / trials
    t0 = time.perf_counter()
    for p, c in instances:
        oracle_project(p, c, method="dual")
    slow = (time.perf_counter() - t0) / trials
    return {"N": n_classes, "trials": trials, "fast_mean_s": fast, "oracle_mean_s": slow,
            "ratio": slow / fast if fast > 0 else float("inf")}


def benchmark_json(results: list[dict]) -> str:
    return json.dumps({"benchmarks": results}, indent=2)
