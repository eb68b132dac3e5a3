"""Self-feedback training with ERM and SAM baselines under one harness.

Each SFT iteration runs a feedback phase (one SAM step of the model on the
refiner's soft labels for a sampled domain, then sharpness on fresh
batches from that domain and a held-out one) followed by a refinement phase
(one step of the refiner on projection cross-entropy plus the sharpness
penalties). The model and refiner have separate Adam states.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import math
import time
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import network
from .diffmath import AdamState, ParamSet, Tape, adam_step
from .domains import DGProblem, DomainDataset, minibatch, one_hot
from .projection import pce_loss, project_batch
from .sharpness import FeedbackSignal, feedback_signal, sam_loss

ALGORITHMS = ("erm", "sam", "sft")
CSV_HEADER = ("step", "train_loss", "sharpness_d", "sharpness_dp", "feedback", "pce", "refine",
              "train_acc", "test_acc")


class ConfigError(ValueError):
    pass


class NumericalError(ArithmeticError):
    def __init__(self, step: int, last_good_step: int, what: str):
        super().__init__(f"non-finite {what} at step {step} (last good step {last_good_step})")
        self.step = step
        self.last_good_step = last_good_step


@dataclass(frozen=True)
class TrainConfig:
    algorithm: str = "sft"
    lr: float = 5e-4
    batch_size: int = 16
    steps: int = 2000
    rho: float = 0.05
    lambda1: float = 0.0
    lambda2: float = 0.0
    alpha: float = 10.0
    seed: int = 0
    eval_every: int = 100
    arch: str = network.LINEAR
    hidden: int = 16
    init_std: float = 0.01
    zero_grad_policy: str = "zero"

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if not self.steps > 0 or not self.batch_size > 0 or not self.eval_every > 0:
            raise ConfigError("steps, batch_size and eval_every must be positive")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.algorithm in ("sam", "sft") and not self.rho > 0:
            raise ConfigError(f"rho must be positive, got {self.rho}")
        if not (self.lambda1 >= 0 and self.lambda2 >= 0):
            raise ConfigError(f"lambda1 and lambda2 must be non-negative, got {self.lambda1}, {self.lambda2}")
        if not self.alpha >= 1:
            raise ConfigError(f"alpha must be >= 1, got {self.alpha}")
        if self.arch not in (network.LINEAR, network.MLP):
            raise ConfigError(f"unknown arch {self.arch!r}")
        if self.zero_grad_policy not in ("zero", "error"):
            raise ConfigError(f"unknown zero_grad_policy {self.zero_grad_policy!r}")

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class RunRecord:
    config: TrainConfig
    rows: list[dict[str, Any]]
    theta: ParamSet
    phi: ParamSet | None
    wall_time: float = 0.0

    @property
    def final(self) -> dict[str, Any]:
        return next(r for r in reversed(self.rows) if r["test_acc"] is not None)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for row in self.rows:
            writer.writerow(["" if row[k] is None else (repr(row[k]) if isinstance(row[k], float)
                                                         else row[k]) for k in CSV_HEADER])
        return buf.getvalue()


@dataclass
class Rngs:
    """Independent streams: ``train`` drives the model's batches (shared
    verbatim across algorithms for paired comparisons), ``aux`` the extra
    batches drawn by the feedback and refinement phases."""

    train: np.random.Generator
    aux: np.random.Generator
    init_theta: np.random.Generator
    init_phi: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "Rngs":
        return cls(*[np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)])


@dataclass
class Feedback:
    pair: tuple[int, int]
    train_loss: float
    signal: FeedbackSignal
    x_d: np.ndarray = field(repr=False)
    y_d: np.ndarray = field(repr=False)
    x_dp: np.ndarray = field(repr=False)
    y_dp: np.ndarray = field(repr=False)


@dataclass
class Refinement:
    pce: float
    refine: float
    grads: ParamSet = field(repr=False)


def evaluate(theta: ParamSet, dataset: DomainDataset) -> float:
    """Fraction of argmax-correct predictions; ties go to the lowest class index."""
    return _correct(theta, dataset) / len(dataset)


def _correct(theta: ParamSet, dataset: DomainDataset) -> int:
    z = network.logits(theta, dataset.inputs)
    return int(np.sum(np.argmax(z, axis=1) == dataset.labels))


def pooled_accuracy(theta: ParamSet, domains) -> float:
    domains = list(domains)
    return sum(_correct(theta, d) for d in domains) / sum(len(d) for d in domains)


def _sample_pair(problem: DGProblem, rng: np.random.Generator) -> tuple[int, int]:
    d, dp = rng.choice(len(problem.training_domains), size=2, replace=False)
    return int(d), int(dp)


def init_state(problem: DGProblem, cfg: TrainConfig, rngs: Rngs):
    kw = dict(arch=cfg.arch, hidden=cfg.hidden, std=cfg.init_std)
    theta = network.init_params(problem.feature_dim, problem.n_classes, rngs.init_theta,
                                role="model", **kw)
    phi = network.init_params(problem.feature_dim, problem.n_classes, rngs.init_phi,
                              role="refiner", **kw)
    return theta, phi, AdamState.for_params(theta, cfg.lr), AdamState.for_params(phi, cfg.lr)


def feedback_phase(theta: ParamSet, phi: ParamSet, problem: DGProblem, cfg: TrainConfig,
                   rngs: Rngs, opt_theta: AdamState) -> tuple[ParamSet, Feedback]:
    """One SAM step of the model on refiner soft labels, then the feedback signal."""
    if len(problem.training_domains) < 2:
        raise ConfigError("the feedback phase needs at least two training domains")
    d, dp = _sample_pair(problem, rngs.train)
    x, _ = minibatch(problem.training_domains[d], cfg.batch_size, rngs.train)
    soft = network.predict_proba(phi, x)
    loss, grads = sam_loss(theta, x, soft, cfg.rho, cfg.zero_grad_policy)
    theta = adam_step(opt_theta, theta, grads)

    x_d, y_d = minibatch(problem.training_domains[d], cfg.batch_size, rngs.aux)
    x_dp, y_dp = minibatch(problem.training_domains[dp], cfg.batch_size, rngs.aux)
    signal = feedback_signal(theta, x_d, x_dp, network.predict_proba(phi, x_d),
                             network.predict_proba(phi, x_dp), cfg.rho, cfg.zero_grad_policy)
    return theta, Feedback((d, dp), loss, signal, x_d, y_d, x_dp, y_dp)


def refine_objective(phi: ParamSet, fb: Feedback, cfg: TrainConfig, targets=None):
    """Record the refinement loss on a fresh tape.

    PCE is estimated on the union of both feedback batches; the sharpness
    terms reuse the feedback phase's perturbations and log-probabilities.
    ``targets`` defaults to projections of the current refiner outputs.
    Returns ``(tape, pce_node, refine_node, targets)``.
    """
    tape = Tape()
    x_u = np.vstack([fb.x_d, fb.x_dp])
    y_u = np.concatenate([fb.y_d, fb.y_dp])
    soft = network.probs_graph(tape, phi, x_u)
    if targets is None:
        targets = project_batch(soft.value, y_u, cfg.alpha)
    pce = pce_loss(tape, soft, targets)

    n_d, n_dp = len(fb.y_d), len(fb.y_dp)
    rep_d, rep_dp = fb.signal.report_d, fb.signal.report_dp
    # row-padded constants pick each domain's rows out of the union batch
    diff_d = np.vstack([rep_d.log_probs_base - rep_d.log_probs_perturbed, np.zeros((n_dp, soft.value.shape[1]))])
    diff_dp = np.vstack([np.zeros((n_d, soft.value.shape[1])), rep_dp.log_probs_base - rep_dp.log_probs_perturbed])
    s_d = tape.scale(tape.sum(tape.mul(soft, tape.const(diff_d))), 1.0 / n_d)
    s_dp = tape.scale(tape.sum(tape.mul(soft, tape.const(diff_dp))), 1.0 / n_dp)
    refine = pce + cfg.lambda1 * s_d + cfg.lambda2 * tape.abs(s_d - s_dp)
    return tape, pce, refine, targets


def refinement_phase(theta: ParamSet, phi: ParamSet, problem: DGProblem, cfg: TrainConfig,
                     fb: Feedback, opt_phi: AdamState) -> tuple[ParamSet, Refinement]:
    """One Adam step of the refiner on PCE + lambda1 S_d + lambda2 |S_d - S_d'|.

    ``theta`` enters only through the feedback's constants and is not modified.
    """
    tape, pce, refine, _ = refine_objective(phi, fb, cfg)
    grads = tape.backward(refine, role="refiner")
    phi = adam_step(opt_phi, phi, grads)
    return phi, Refinement(float(pce.value[0, 0]), float(refine.value[0, 0]), grads)


def _finite(step: int, last_good: int, **values) -> None:
    for name, v in values.items():
        if v is not None and not math.isfinite(v):
            raise NumericalError(step, last_good, name)


def train(problem: DGProblem, cfg: TrainConfig) -> RunRecord:
    """Run ``cfg.steps`` iterations of the configured algorithm."""
    if len(problem.training_domains) < 2:
        raise ConfigError("training needs at least two training domains")
    small = min(len(d) for d in problem.training_domains)
    if cfg.batch_size > small:
        raise ConfigError(f"batch_size {cfg.batch_size} exceeds smallest training domain ({small})")
    started = time.perf_counter()
    rngs = Rngs.from_seed(cfg.seed)
    theta, phi, opt_theta, opt_phi = init_state(problem, cfg, rngs)
    rows = []
    last_good = 0
    for step in range(1, cfg.steps + 1):
        row = dict.fromkeys(CSV_HEADER)
        row["step"] = step
        if cfg.algorithm == "sft":
            theta, fb = feedback_phase(theta, phi, problem, cfg, rngs, opt_theta)
            phi, ref = refinement_phase(theta, phi, problem, cfg, fb, opt_phi)
            row.update(train_loss=fb.train_loss, sharpness_d=fb.signal.report_d.sharpness,
                       sharpness_dp=fb.signal.report_dp.sharpness, feedback=fb.signal.value,
                       pce=ref.pce, refine=ref.refine)
        else:
            d, _ = _sample_pair(problem, rngs.train)
            x, y = minibatch(problem.training_domains[d], cfg.batch_size, rngs.train)
            if cfg.algorithm == "sam":
                loss, grads = sam_loss(theta, x, y, cfg.rho, cfg.zero_grad_policy)
            else:
                loss, grads = network.cross_entropy(theta, x, one_hot(y, problem.n_classes))
            theta = adam_step(opt_theta, theta, grads)
            row["train_loss"] = loss
        _finite(step, last_good, **{k: row[k] for k in CSV_HEADER[1:7]})
        if step % cfg.eval_every == 0 or step == cfg.steps:
            row["train_acc"] = pooled_accuracy(theta, problem.training_domains)
            row["test_acc"] = pooled_accuracy(theta, problem.test_domains)
        rows.append(row)
        last_good = step
    return RunRecord(cfg, rows, theta, phi if cfg.algorithm == "sft" else None,
                     time.perf_counter() - started)
