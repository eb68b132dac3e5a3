"""Command-line entry points: gen-data, train, sweep, landscape, bench-projection.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import landscape, projection
from .diffmath import ParamSet
from .domains import TOY_CLASSES, ClassSpec, DGProblem, ParameterError, generate_toy
from .sft import ConfigError, NumericalError, RunRecord, TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
CONFIG_KEYS = {"data", "train", "sweep", "landscape"}
DATA_KEYS = {"seed", "classes", "samples_per_class_per_domain", "resample_means", "n_domains"}
LANDSCAPE_KEYS = {"resolution", "beta_range"}
SWEEP_AXES = ("lambda1", "lambda2", "rho", "alpha")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# config


def load_config(path) -> dict[str, Any]:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError("config must be a JSON object")
    unknown = set(doc) - CONFIG_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    for section, allowed in (("data", DATA_KEYS), ("landscape", LANDSCAPE_KEYS)):
        extra = set(doc.get(section, {})) - allowed
        if extra:
            raise UsageError(f"unknown {section} keys: {sorted(extra)}")
    return doc


def problem_from_config(doc: dict[str, Any]) -> DGProblem:
    data = doc.get("data", {})
    if "seed" not in data:
        raise UsageError("data.seed is required: every dataset must be generated from an explicit seed")
    try:
        specs = [ClassSpec.from_json(c) for c in data["classes"]] if "classes" in data else list(TOY_CLASSES)
        if data.get("resample_means", False):
            specs = [ClassSpec(s.mean, s.sigma, (), s.domain_sigma) for s in specs]
        return generate_toy(specs, int(data.get("samples_per_class_per_domain", 100)),
                            int(data["seed"]), n_domains=data.get("n_domains"))
    except (ParameterError, KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"bad data config: {exc}") from exc


def train_config(doc: dict[str, Any], seed: int | None = None, **overrides) -> TrainConfig:
    base = dict(doc.get("train", {}))
    if seed is not None:
        base["seed"] = seed
    elif "seed" not in base:
        raise UsageError("a training seed is required (train.seed or --seeds)")
    base.update(overrides)
    try:
        return TrainConfig.from_dict(base)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc


def parse_seeds(text: str | None) -> list[int] | None:
    """``"3"``, ``"1,4,9"`` or an inclusive range ``"1..10"``."""
    if text is None:
        return None
    seeds: list[int] = []
    try:
        for part in text.split(","):
            if ".." in part:
                lo, hi = part.split("..")
                seeds.extend(range(int(lo), int(hi) + 1))
            else:
                seeds.append(int(part))
    except ValueError as exc:
        raise UsageError(f"bad --seeds value {text!r}") from exc
    if not seeds:
        raise UsageError("--seeds is empty")
    return seeds


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, cwd=Path(__file__).parent, timeout=10)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(config_path, out_path) -> DGProblem:
    doc = load_config(config_path)
    problem = problem_from_config(doc)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    problem.save(out)
    counts = ", ".join(f"D{d.domain_id}({d.role})={len(d)}" for d in problem.domains)
    print(f"wrote {out}: {len(problem.domains)} domains, {problem.n_classes} classes; {counts}")
    return problem


def write_run(record: RunRecord, out_dir, config_snapshot: dict, dataset_path) -> Path:
    """Write the log CSV, the metadata sidecar and the manifest; return the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = record.config
    stem = f"run_{cfg.algorithm}_seed{cfg.seed}"
    csv_path = out_dir / f"{stem}.csv"
    meta_path = out_dir / f"{stem}.json"
    csv_path.write_text(record.to_csv())
    meta_path.write_text(json.dumps({
        "train_config": cfg.to_dict(),
        "git_describe": _git_describe(),
        "wall_time_s": record.wall_time,
        "final": record.final,
        "theta": record.theta.to_json(),
        "phi": None if record.phi is None else record.phi.to_json(),
    }, indent=2))
    manifest_path = out_dir / f"manifest_{cfg.algorithm}_seed{cfg.seed}.json"
    manifest_path.write_text(json.dumps({
        "config": config_snapshot,
        "train_config": cfg.to_dict(),
        "seeds": [cfg.seed],
        "artifacts": {"dataset": str(dataset_path), "run_csv": str(csv_path),
                      "run_meta": str(meta_path)},
        "finished_at": _now(),
    }, indent=2))
    return manifest_path


def cmd_train(config_path, dataset_path, out_dir, seeds: Sequence[int] | None = None) -> list[Path]:
    doc = load_config(config_path)
    problem = _load_dataset(dataset_path)
    cfgs = [train_config(doc, s) for s in seeds] if seeds else [train_config(doc)]
    manifests = []
    for cfg in cfgs:
        record = train(problem, cfg)
        manifests.append(write_run(record, out_dir, doc, dataset_path))
        final = record.final
        print(f"{cfg.algorithm} seed={cfg.seed}: train_acc={final['train_acc']:.4f} "
              f"test_acc={final['test_acc']:.4f}")
    return manifests


def _load_dataset(path) -> DGProblem:
    try:
        return DGProblem.load(path)
    except (OSError, json.JSONDecodeError, KeyError, ParameterError) as exc:
        raise UsageError(f"cannot load dataset {path}: {exc}") from exc


def expand_axis(values) -> list[float]:
    """A list of values, or ``{"start", "stop", "num"}`` for an inclusive linspace."""
    if isinstance(values, dict):
        extra = set(values) - {"start", "stop", "num"}
        if extra:
            raise UsageError(f"unknown grid keys {sorted(extra)}")
        return [float(v) for v in np.linspace(values["start"], values["stop"], int(values["num"]))]
    if isinstance(values, (int, float)):
        return [float(values)]
    return [float(v) for v in values]


def sweep_cells(spec: dict[str, Any]) -> list[dict[str, float]]:
    unknown = set(spec) - set(SWEEP_AXES)
    if unknown:
        raise UsageError(f"sweep axes must be among {SWEEP_AXES}, got {sorted(unknown)}")
    axes = [a for a in SWEEP_AXES if a in spec]
    grids = [expand_axis(spec[a]) for a in axes]
    if not axes or any(not g for g in grids):
        raise UsageError("sweep grid is empty")
    return [dict(zip(axes, combo)) for combo in itertools.product(*grids)]


def _run_cell(args) -> dict[str, Any]:
    problem_doc, cfg_dict = args
    problem = DGProblem.from_json(problem_doc) if isinstance(problem_doc, dict) else problem_doc
    record = train(problem, TrainConfig(**cfg_dict))
    final = record.final
    return {"train_acc": final["train_acc"], "test_acc": final["test_acc"]}


def run_sweep(problem: DGProblem, base: dict[str, Any], cells: list[dict[str, float]],
              seeds: Sequence[int], jobs: int = 1) -> tuple[list[dict], list[dict]]:
    """Train every cell x seed; return (per-run rows, per-cell summaries)."""
    tasks = []
    for cell in cells:
        for seed in seeds:
            cfg = dict(base, seed=int(seed), **cell)
            TrainConfig.from_dict(cfg)  # fail fast before any work
            tasks.append((cell, cfg))
    if jobs > 1:
        doc = problem.to_json()
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, [(doc, cfg) for _, cfg in tasks]))
    else:
        results = [_run_cell((problem, cfg)) for _, cfg in tasks]
    runs = [dict(cell, seed=cfg["seed"], **res) for (cell, cfg), res in zip(tasks, results)]
    summaries = []
    for cell in cells:
        mine = [r for r in runs if all(r[k] == v for k, v in cell.items())]
        tr = np.array([r["train_acc"] for r in mine])
        te = np.array([r["test_acc"] for r in mine])
        ddof = 1 if len(mine) > 1 else 0
        summaries.append(dict(cell, n_seeds=len(mine),
                              train_acc_mean=float(tr.mean()), train_acc_std=float(tr.std(ddof=ddof)),
                              test_acc_mean=float(te.mean()), test_acc_std=float(te.std(ddof=ddof))))
    return runs, summaries


def _rows_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def cmd_sweep(config_path, sweep_spec, dataset_path, out_dir, seeds: Sequence[int] | None,
              jobs: int = 1) -> Path:
    doc = load_config(config_path)
    if sweep_spec is None:
        spec = doc.get("sweep")
        if spec is None:
            raise UsageError("no sweep spec: pass --sweep or add a 'sweep' section to the config")
    elif isinstance(sweep_spec, dict):
        spec = sweep_spec
    else:
        try:
            spec = json.loads(Path(sweep_spec).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read sweep spec {sweep_spec}: {exc}") from exc
    cells = sweep_cells(spec)
    base = dict(doc.get("train", {}))
    if seeds is None:
        if "seed" not in base:
            raise UsageError("a training seed is required (train.seed or --seeds)")
        seeds = [base["seed"]]
    base.pop("seed", None)
    problem = _load_dataset(dataset_path)
    try:
        runs, summaries = run_sweep(problem, base, cells, seeds, jobs)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary_path = out_dir / "sweep_summary.csv"
    summary_path.write_text(_rows_csv(summaries))
    (out_dir / "sweep_runs.csv").write_text(_rows_csv(runs))
    (out_dir / "sweep_manifest.json").write_text(json.dumps({
        "config": doc, "sweep": spec, "seeds": list(map(int, seeds)),
        "artifacts": {"dataset": str(dataset_path), "summary_csv": str(summary_path),
                      "runs_csv": str(out_dir / "sweep_runs.csv")},
        "finished_at": _now(),
    }, indent=2))
    print(f"{len(runs)} runs over {len(cells)} cells -> {summary_path}")
    return summary_path


def cmd_landscape(manifest_path, dataset_path, out_dir, config_path=None) -> Path:
    doc = load_config(config_path)
    try:
        manifest = json.loads(Path(manifest_path).read_text())
        meta = json.loads(Path(manifest["artifacts"]["run_meta"]).read_text())
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise UsageError(f"cannot read run manifest {manifest_path}: {exc}") from exc
    if not meta.get("theta") or not meta.get("phi"):
        raise UsageError("manifest run has no model and refiner snapshots (train with algorithm=sft)")
    theta = ParamSet.from_json(meta["theta"])
    phi = ParamSet.from_json(meta["phi"])
    problem = _load_dataset(dataset_path)
    opts = doc.get("landscape", {})
    cfg = meta["train_config"]
    grids = landscape.run_surfaces(theta, phi, problem, int(cfg["seed"]),
                                   resolution=int(opts.get("resolution", 41)),
                                   beta_range=tuple(opts.get("beta_range", (-2.0, 2.0))),
                                   init_std=float(cfg.get("init_std", 0.01)))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {}
    for g in grids:
        path = out_dir / f"{g.stem()}.csv"
        path.write_text(g.to_csv())
        files[g.stem()] = {"csv": str(path), **g.metadata}
    scores = {kind: landscape.consistency_score([g for g in grids if g.metadata["loss_kind"] == kind])
              for kind in landscape.LOSS_KINDS}
    report = out_dir / "landscape.json"
    report.write_text(json.dumps({"manifest": str(manifest_path), "grids": files,
                                  "consistency": scores}, indent=2, sort_keys=True))
    print(f"consistency (lower = more alike): onehot={scores['onehot']:.4f} soft={scores['soft']:.4f}")
    return report


def cmd_bench_projection(n_list: Sequence[int], trials: int, out_path=None, seed: int = 0) -> dict:
    for n in n_list:
        if n > 200 or n < 2:
            raise UsageError(f"benchmark N must be in [2, 200], got {n}")
    results = [projection.benchmark_projection(n, trials, seed) for n in n_list]
    text = projection.benchmark_json(results)
    if out_path:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(text)
    print(text)
    return json.loads(text)


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sftdg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the toy multi-domain dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train erm / sam / sft")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds")

    p = sub.add_parser("sweep", help="grid over lambda1/lambda2/rho/alpha x seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sweep", help="JSON sweep spec (defaults to the config's 'sweep' section)")
    p.add_argument("--seeds")
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("landscape", help="2-D loss surfaces for a trained SFT run")
    p.add_argument("--manifest", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")

    p = sub.add_parser("bench-projection", help="time the projection against the dual oracle")
    p.add_argument("--n", type=int, nargs="+", default=[2, 10, 100])
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        if args.command == "gen-data":
            cmd_gen_data(args.config, args.out)
        elif args.command == "train":
            cmd_train(args.config, args.dataset, args.out, parse_seeds(args.seeds))
        elif args.command == "sweep":
            cmd_sweep(args.config, args.sweep, args.dataset, args.out, parse_seeds(args.seeds),
                      args.jobs)
        elif args.command == "landscape":
            cmd_landscape(args.manifest, args.dataset, args.out, args.config)
        elif args.command == "bench-projection":
            cmd_bench_projection(args.n, args.trials, args.out, args.seed)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
