"""Hierarchical-Gaussian multi-domain toy data and DG problem containers."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class ParameterError(ValueError):
    pass


@dataclass(frozen=True)
class ClassSpec:
    """Generative parameters of one class.

    ``domain_means`` may be empty, in which case per-domain means are drawn
    from N(mean, sigma^2 I) by :func:`sample_domain_means`.
    """

    mean: tuple[float, float]
    sigma: float
    domain_means: tuple[tuple[float, float], ...] = ()
    domain_sigma: float = 0.2

    def __post_init__(self):
        if not self.sigma > 0 or not self.domain_sigma > 0:
            raise ParameterError(f"class sigmas must be positive, got {self.sigma}, {self.domain_sigma}")
        object.__setattr__(self, "mean", tuple(float(v) for v in self.mean))
        object.__setattr__(self, "domain_means",
                           tuple(tuple(float(v) for v in m) for m in self.domain_means))

    def to_json(self) -> dict:
        return {"mean": list(self.mean), "sigma": self.sigma,
                "domain_means": [list(m) for m in self.domain_means],
                "domain_sigma": self.domain_sigma}

    @classmethod
    def from_json(cls, doc: dict) -> "ClassSpec":
        unknown = set(doc) - {"mean", "sigma", "domain_means", "domain_sigma"}
        if unknown:
            raise ParameterError(f"unknown class spec keys: {sorted(unknown)}")
        return cls(mean=tuple(doc["mean"]), sigma=float(doc["sigma"]),
                   domain_means=tuple(tuple(m) for m in doc.get("domain_means", ())),
                   domain_sigma=float(doc.get("domain_sigma", 0.2)))


# Three classes, four domains; the last domain is held out for testing.
TOY_CLASSES = (
    ClassSpec((0.0, math.sqrt(3) / 2), 0.4,
              ((0.71, 1.03), (-0.04, 0.20), (0.08, 1.22), (-0.52, 0.54)), 0.2),
    ClassSpec((-0.5, 0.0), 0.4,
              ((-0.11, 0.90), (-0.45, 0.15), (-0.68, 0.03), (-0.81, -0.11)), 0.2),
    ClassSpec((0.5, 0.0), 0.4,
              ((1.25, -0.39), (-0.20, 0.52), (0.80, 0.23), (0.83, -0.12)), 0.2),
)


@dataclass(frozen=True, eq=False)
class DomainDataset:
    domain_id: int
    inputs: np.ndarray
    labels: np.ndarray
    role: str = "train"

    def __post_init__(self):
        x = np.array(self.inputs, dtype=np.float64)
        y = np.array(self.labels, dtype=np.int64).ravel()
        if x.ndim != 2 or x.shape[0] != y.shape[0]:
            raise ParameterError(f"domain {self.domain_id}: inputs {x.shape} vs {y.shape[0]} labels")
        if y.size == 0:
            raise ParameterError(f"domain {self.domain_id} is empty")
        if y.min() < 0:
            raise ParameterError(f"domain {self.domain_id}: negative label")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, DomainDataset):
            return NotImplemented
        return (self.domain_id == other.domain_id and self.role == other.role
                and np.array_equal(self.inputs, other.inputs)
                and np.array_equal(self.labels, other.labels))

    @property
    def feature_dim(self) -> int:
        return self.inputs.shape[1]


@dataclass(frozen=True, eq=False)
class DGProblem:
    training_domains: tuple[DomainDataset, ...]
    test_domains: tuple[DomainDataset, ...]
    n_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "training_domains", tuple(self.training_domains))
        object.__setattr__(self, "test_domains", tuple(self.test_domains))
        if len(self.training_domains) < 2:
            raise ParameterError("a DG problem needs at least two training domains")
        if len(self.test_domains) < 1:
            raise ParameterError("a DG problem needs at least one test domain")
        for d in self.domains:
            if d.labels.max() >= self.n_classes:
                raise ParameterError(f"domain {d.domain_id} has labels outside [0, {self.n_classes})")

    @property
    def domains(self) -> tuple[DomainDataset, ...]:
        return tuple(sorted(self.training_domains + self.test_domains, key=lambda d: d.domain_id))

    @property
    def feature_dim(self) -> int:
        return self.training_domains[0].feature_dim

    def __eq__(self, other) -> bool:
        if not isinstance(other, DGProblem):
            return NotImplemented
        return (self.n_classes == other.n_classes
                and self.training_domains == other.training_domains
                and self.test_domains == other.test_domains)

    def to_json(self) -> dict:
        return {
            "n_classes": self.n_classes,
            "domains": [
                {"id": d.domain_id, "role": d.role,
                 "inputs": d.inputs.tolist(), "labels": d.labels.tolist()}
                for d in self.domains
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "DGProblem":
        train, test = [], []
        for d in doc["domains"]:
            ds = DomainDataset(int(d["id"]), np.array(d["inputs"], dtype=np.float64),
                               np.array(d["labels"], dtype=np.int64), d["role"])
            if d["role"] == "train":
                train.append(ds)
            elif d["role"] == "test":
                test.append(ds)
            else:
                raise ParameterError(f"unknown domain role {d['role']!r}")
        return cls(tuple(train), tuple(test), int(doc["n_classes"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "DGProblem":
        return cls.from_json(json.loads(Path(path).read_text()))


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).ravel()
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def sample_domain_means(specs: Sequence[ClassSpec], n_domains: int, seed: int) -> list[ClassSpec]:
    """Draw per-domain means mu_ij ~ N(mu_i, sigma_i^2 I) for every class."""
    if n_domains < 1:
        raise ParameterError("n_domains must be positive")
    rng = np.random.default_rng(seed)
    out = []
    for spec in specs:
        draws = rng.normal(spec.mean, spec.sigma, size=(n_domains, len(spec.mean)))
        out.append(ClassSpec(spec.mean, spec.sigma, tuple(map(tuple, draws)), spec.domain_sigma))
    return out


def generate_toy(specs: Sequence[ClassSpec] = TOY_CLASSES, samples_per_class_per_domain: int = 100,
                 seed: int = 0, n_domains: int | None = None,
                 test_domains: Sequence[int] | None = None) -> DGProblem:
    """Sample a class-balanced multi-domain dataset.

    Specs without fixed ``domain_means`` get fresh means drawn with the same
    seed. By default the last domain is the test domain.
    """
    if not specs:
        raise ParameterError("need at least one class spec")
    if samples_per_class_per_domain < 1:
        raise ParameterError("samples_per_class_per_domain must be positive")
    if n_domains is None:
        n_domains = max(len(s.domain_means) for s in specs) or 4
    rng = np.random.default_rng(seed)
    if any(not s.domain_means for s in specs):
        mean_seed = int(rng.integers(2**32))
        specs = [s if s.domain_means else sample_domain_means([s], n_domains, mean_seed + i)[0]
                 for i, s in enumerate(specs)]
    for i, s in enumerate(specs):
        if len(s.domain_means) != n_domains:
            raise ParameterError(f"class {i} has {len(s.domain_means)} domain means, expected {n_domains}")
    test_ids = set(test_domains) if test_domains is not None else {n_domains - 1}
    n = samples_per_class_per_domain
    train, test = [], []
    for j in range(n_domains):
        xs, ys = [], []
        for i, s in enumerate(specs):
            mu = np.asarray(s.domain_means[j])
            xs.append(mu + s.domain_sigma * rng.standard_normal((n, mu.size)))
            ys.append(np.full(n, i))
        role = "test" if j in test_ids else "train"
        ds = DomainDataset(j, np.vstack(xs), np.concatenate(ys), role)
        (test if role == "test" else train).append(ds)
    return DGProblem(tuple(train), tuple(test), len(specs))


def minibatch(dataset: DomainDataset, batch_size: int, rng: np.random.Generator):
    """Uniform sample of ``batch_size`` distinct rows."""
    if batch_size < 1 or batch_size > len(dataset):
        raise ParameterError(f"batch_size {batch_size} not in [1, {len(dataset)}]")
    idx = rng.choice(len(dataset), size=batch_size, replace=False)
    return dataset.inputs[idx], dataset.labels[idx]
