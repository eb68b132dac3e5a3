"""2-D loss surfaces on the plane through three parameter snapshots."""

from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import network
from .diffmath import ParamSet
from .domains import DGProblem, DomainDataset, one_hot

LOSS_KINDS = ("onehot", "soft")
INDEPENDENCE_TOL = 1e-9


class DegenerateAxesError(ValueError):
    pass


class SurfaceMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class SurfaceSpec:
    anchors: tuple[ParamSet, ParamSet, ParamSet]
    beta_range: tuple[float, float] = (-2.0, 2.0)
    resolution: int = 41
    loss_kind: str = "onehot"
    domain_id: int | None = None  # defaults to the evaluated dataset's id

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.resolution < 2:
            raise ValueError("resolution must be at least 2")
        lo, hi = self.beta_range
        if not hi > lo:
            raise ValueError(f"empty beta range {self.beta_range}")

    @property
    def betas(self) -> np.ndarray:
        return np.linspace(self.beta_range[0], self.beta_range[1], self.resolution)

    def describe(self) -> dict:
        return {"beta_range": list(self.beta_range), "resolution": self.resolution,
                "loss_kind": self.loss_kind, "domain_id": self.domain_id}


@dataclass(frozen=True, eq=False)
class SurfaceGrid:
    betas1: np.ndarray
    betas2: np.ndarray
    losses: np.ndarray  # losses[i, j] at (betas1[i], betas2[j])
    metadata: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["beta1", "beta2", "loss"])
        for i, j in itertools.product(range(self.betas1.size), range(self.betas2.size)):
            w.writerow([repr(float(self.betas1[i])), repr(float(self.betas2[j])),
                        repr(float(self.losses[i, j]))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, metadata: dict | None = None) -> "SurfaceGrid":
        rows = list(csv.DictReader(io.StringIO(text)))
        b1 = sorted({float(r["beta1"]) for r in rows})
        b2 = sorted({float(r["beta2"]) for r in rows})
        idx1 = {b: i for i, b in enumerate(b1)}
        idx2 = {b: j for j, b in enumerate(b2)}
        losses = np.full((len(b1), len(b2)), np.nan)
        for r in rows:
            losses[idx1[float(r["beta1"])], idx2[float(r["beta2"])]] = float(r["loss"])
        return cls(np.array(b1), np.array(b2), losses, dict(metadata or {}))

    def stem(self) -> str:
        return f"surface_d{self.metadata.get('domain_id', 0)}_{self.metadata.get('loss_kind', 'onehot')}"

    def write(self, out_dir) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / f"{self.stem()}.csv"
        meta_path = out_dir / f"{self.stem()}.json"
        csv_path.write_text(self.to_csv())
        meta_path.write_text(json.dumps(self.metadata, indent=2, sort_keys=True))
        return csv_path, meta_path

    @classmethod
    def read(cls, csv_path) -> "SurfaceGrid":
        csv_path = Path(csv_path)
        meta_path = csv_path.with_suffix(".json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        return cls.from_csv(csv_path.read_text(), meta)


def gram_schmidt_axes(theta1: ParamSet, theta2: ParamSet, theta3: ParamSet) -> tuple[ParamSet, ParamSet]:
    """Orthonormal axes spanning theta2 - theta1 and theta3 - theta1."""
    theta1.check_like(theta2, "anchor 2")
    theta1.check_like(theta3, "anchor 3")
    a = theta2.flatten() - theta1.flatten()
    b = theta3.flatten() - theta1.flatten()
    na = np.linalg.norm(a)
    if na <= INDEPENDENCE_TOL:
        raise DegenerateAxesError("first two anchors coincide")
    e1 = a / na
    r = b - np.dot(b, e1) * e1
    # second pass removes the rounding left by the first
    r -= np.dot(r, e1) * e1
    nr = np.linalg.norm(r)
    if nr <= INDEPENDENCE_TOL * max(1.0, np.linalg.norm(b)):
        raise DegenerateAxesError("anchor directions are linearly dependent")
    return theta1.unflatten(e1), theta1.unflatten(r / nr)


def _targets(dataset: DomainDataset, n_classes: int, loss_kind: str, soft_labels):
    if loss_kind == "soft":
        if soft_labels is None:
            raise ValueError("soft-label surface needs soft_labels")
        soft = np.asarray(soft_labels, dtype=np.float64)
        if soft.shape != (len(dataset), n_classes):
            raise SurfaceMismatchError(f"soft labels {soft.shape} vs dataset ({len(dataset)}, {n_classes})")
        return soft
    return one_hot(dataset.labels, n_classes)


def evaluate_surface(spec: SurfaceSpec, dataset: DomainDataset, soft_labels=None) -> SurfaceGrid:
    """Full-domain cross-entropy at theta1 + b1 e1 + b2 e2 over the grid."""
    theta1 = spec.anchors[0]
    e1, e2 = gram_schmidt_axes(*spec.anchors)
    n_classes = network.logits(theta1, dataset.inputs[:1]).shape[1]
    targets = _targets(dataset, n_classes, spec.loss_kind, soft_labels)
    base, f1, f2 = theta1.flatten(), e1.flatten(), e2.flatten()
    betas = spec.betas
    losses = np.empty((betas.size, betas.size))
    for i, b1 in enumerate(betas):
        for j, b2 in enumerate(betas):
            theta = theta1.unflatten(base + b1 * f1 + b2 * f2)
            losses[i, j] = network.cross_entropy_value(theta, dataset.inputs, targets)
    meta = spec.describe()
    meta["domain_id"] = dataset.domain_id if spec.domain_id is None else spec.domain_id
    return SurfaceGrid(betas.copy(), betas.copy(), losses, meta)


def _minmax(losses: np.ndarray) -> np.ndarray:
    lo, hi = losses.min(), losses.max()
    if hi - lo <= 0:
        return np.zeros_like(losses)
    return (losses - lo) / (hi - lo)


def consistency_score(grids: Sequence[SurfaceGrid]) -> float:
    """Mean pairwise RMS difference of min-max normalised surfaces (lower = more alike)."""
    grids = list(grids)
    if len(grids) < 2:
        raise SurfaceMismatchError("need at least two grids")
    ref = grids[0]
    for g in grids[1:]:
        if (g.losses.shape != ref.losses.shape or not np.array_equal(g.betas1, ref.betas1)
                or not np.array_equal(g.betas2, ref.betas2)):
            raise SurfaceMismatchError("grids do not share axes")
    normed = [_minmax(g.losses) for g in grids]
    diffs = [np.sqrt(np.mean((a - b) ** 2)) for a, b in itertools.combinations(normed, 2)]
    return float(np.mean(diffs))


def random_anchor(like: ParamSet, seed: int, std: float = 0.01) -> ParamSet:
    """A freshly initialised parameter set shaped like ``like``."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, value in like.entries.items():
        out[name] = np.zeros_like(value) if name.startswith("b") else rng.normal(0.0, std, value.shape)
    return ParamSet(out, like.role)


def run_surfaces(theta: ParamSet, phi: ParamSet | None, problem: DGProblem, seed: int,
                 resolution: int = 41, beta_range=(-2.0, 2.0), init_std: float = 0.01) -> list[SurfaceGrid]:
    """One-hot and (if a refiner is given) soft-label surfaces for every domain.

    The anchors are the trained model and two random initialisations seeded
    from ``seed``, so all domains share the same plane.
    """
    seeds = np.random.SeedSequence(seed).generate_state(2)
    anchors = (theta, random_anchor(theta, int(seeds[0]), init_std),
               random_anchor(theta, int(seeds[1]), init_std))
    grids = []
    kinds = LOSS_KINDS if phi is not None else ("onehot",)
    for kind in kinds:
        for ds in problem.domains:
            spec = SurfaceSpec(anchors, tuple(beta_range), resolution, kind, ds.domain_id)
            soft = network.predict_proba(phi, ds.inputs) if kind == "soft" else None
            grids.append(evaluate_surface(spec, ds, soft))
    return grids
