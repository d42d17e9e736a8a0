"""Declarative experiments: config parsing, grid expansion, parallel execution and output files.

An experiment is a TOML document (or an equivalent dict)::

    name = "demo"
    algo = "normec"
    seed = 0
    repeats = 1

    [problem]
    kind = "quadratic"
    n = 10
    d = 20

    [params]          # AlgoConfig fields plus init / step_rule
    gamma = 0.01
    beta = 0.1
    alpha = 0.1
    K = 500

    [privacy]         # optional: derive sigma_dp from (eps, delta)
    eps = 8.0
    delta = 1e-5

    [grid]            # optional sweeps
    gamma = [0.001, 0.01]

    [[variants]]      # optional: per-variant overrides, crossed with the grid
    algo = "dpsgd-norm"

Cells are ``variants x grid x repeats`` in a fixed order.  Every cell gets a
seed derived from ``(seed, cell index, repeat)``, so results do not depend on
how many workers run them.
"""

from __future__ import annotations

import copy
import csv
import io
import itertools
import json
import math
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from normec.algorithms import (
    ALGORITHMS,
    AlgoConfig,
    GradAtX0Perturbed,
    ZeroMemory,
    initial_state,
    realized_residual,
    run_safely,
    theorem1_step_size,
)
from normec.oracle import check_theorem1_bound, theorem1_suite
from normec.privacy import DpBudget, calibrate_sigma
from normec.problems import LogisticProblem, make_problem

OUTPUT_ROOT_ENV = "NORMEC_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"
DEFAULT_MAX_RUNS = 10_000
GRID_KEYS = ("algo", "gamma", "beta", "alpha", "tau")
POSITIVE_KEYS = ("gamma", "beta", "tau")

SUMMARY_COLUMNS = (
    "cell",
    "repeat",
    "algo",
    "gamma",
    "beta",
    "alpha",
    "tau",
    "sigma_dp",
    "K",
    "seed",
    "problem_seed",
    "rounds",
    "min_grad_norm",
    "final_grad_norm",
    "final_loss",
    "best_round",
    "realized_R",
    "conforming",
    "residual_violations",
    "diverged",
    "diverged_round",
    "bound_check",
    "bound_margin",
    "accuracy",
    "error",
)

_PARAM_KEYS = {
    "gamma",
    "beta",
    "alpha",
    "K",
    "tau",
    "sigma_dp",
    "server_normalization",
    "x0",
    "noise_convention",
    "dpsgd_noise",
    "topk",
    "divergence_threshold",
    "init",
    "init_radius",
    "step_rule",
    "step_fraction",
}


class ConfigError(ValueError):
    """An invalid experiment config; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class OutputDirError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    name: str
    problem: dict
    algo: str = "normec"
    params: dict = field(default_factory=dict)
    privacy: dict | None = None
    grid: dict = field(default_factory=dict)
    variants: list = field(default_factory=lambda: [{}])
    suite: dict | None = None
    repeats: int = 1
    seed: int = 0
    max_runs: int = DEFAULT_MAX_RUNS
    thin: int = 1
    output_dir: str | None = None

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {"name", "problem", "algo", "params", "privacy", "grid", "variants", "suite", "repeats", "seed", "max_runs", "thin", "output_dir"}
        for key in data:
            if key not in known:
                raise ConfigError(key, "unknown top-level field")
        if "name" not in data:
            raise ConfigError("name", "required")
        if "problem" not in data and "suite" not in data:
            raise ConfigError("problem", "required unless a suite is given")
        cfg = cls(
            name=str(data["name"]),
            problem=dict(data.get("problem", {})),
            algo=data.get("algo", "normec"),
            params=dict(data.get("params", {})),
            privacy=dict(data["privacy"]) if data.get("privacy") else None,
            grid={k: list(v) for k, v in data.get("grid", {}).items()},
            variants=[dict(v) for v in data.get("variants", [{}])] or [{}],
            suite=dict(data["suite"]) if data.get("suite") else None,
            repeats=int(data.get("repeats", 1)),
            seed=int(data.get("seed", 0)),
            max_runs=int(data.get("max_runs", DEFAULT_MAX_RUNS)),
            thin=int(data.get("thin", 1)),
            output_dir=data.get("output_dir"),
        )
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        out = {
            "name": self.name,
            "problem": self.problem,
            "algo": self.algo,
            "params": self.params,
            "grid": self.grid,
            "variants": self.variants,
            "repeats": self.repeats,
            "seed": self.seed,
            "max_runs": self.max_runs,
            "thin": self.thin,
        }
        if self.privacy:
            out["privacy"] = self.privacy
        if self.suite:
            out["suite"] = self.suite
        return out

    def validate(self) -> None:
        if self.algo not in ALGORITHMS:
            raise ConfigError("algo", f"unknown algorithm {self.algo!r}")
        for key in self.params:
            if key not in _PARAM_KEYS:
                raise ConfigError(f"params.{key}", "unknown parameter")
        for key, values in self.grid.items():
            if key not in GRID_KEYS:
                raise ConfigError(f"grid.{key}", f"cannot sweep this field; choose from {', '.join(GRID_KEYS)}")
            if not values:
                raise ConfigError(f"grid.{key}", "empty list")
            for j, v in enumerate(values):
                _check_value(f"grid.{key}[{j}]", key, v)
        for j, variant in enumerate(self.variants):
            for key, v in variant.items():
                if key != "algo" and key not in _PARAM_KEYS:
                    raise ConfigError(f"variants[{j}].{key}", "unknown parameter")
                _check_value(f"variants[{j}].{key}", key, v)
        for key, v in self.params.items():
            _check_value(f"params.{key}", key, v)
        if self.repeats < 1:
            raise ConfigError("repeats", "must be at least 1")
        if self.thin < 1:
            raise ConfigError("thin", "must be at least 1")
        if self.privacy is not None:
            for key in self.privacy:
                if key not in ("eps", "delta", "c"):
                    raise ConfigError(f"privacy.{key}", "unknown field")
            for key in ("eps", "delta"):
                if key not in self.privacy:
                    raise ConfigError(f"privacy.{key}", "required")
        if self.suite is not None and self.suite.get("kind") != "theorem1":
            raise ConfigError("suite.kind", "only 'theorem1' is supported")
        if self.total_runs() > self.max_runs:
            raise ConfigError("max_runs", f"config expands to {self.total_runs()} runs, above the cap {self.max_runs}")

    def grid_size(self) -> int:
        if self.suite is not None:
            return int(self.suite.get("count", 20))
        return len(self.variants) * math.prod(len(v) for v in self.grid.values())

    def total_runs(self) -> int:
        return self.grid_size() * self.repeats


def _check_value(path: str, key: str, value) -> None:
    if key == "algo":
        if value not in ALGORITHMS:
            raise ConfigError(path, f"unknown algorithm {value!r}")
    elif key in POSITIVE_KEYS:
        if not isinstance(value, (int, float)) or not value > 0:
            raise ConfigError(path, f"must be a positive number, got {value!r}")
    elif key == "alpha":
        if not isinstance(value, (int, float)) or value < 0:
            raise ConfigError(path, f"must be a nonnegative number, got {value!r}")
    elif key == "step_rule" and value not in ("fixed", "theorem1"):
        raise ConfigError(path, "must be 'fixed' or 'theorem1'")
    elif key == "init" and value not in ("zero", "perturbed"):
        raise ConfigError(path, "must be 'zero' or 'perturbed'")


def load_config(path, overrides: list[str] | tuple = ()) -> ExperimentConfig:
    """Read a TOML config and apply ``dotted.key=value`` overrides."""
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(str(path), "config file not found") from None
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(str(path), f"invalid TOML: {err}") from None
    return ExperimentConfig.from_dict(apply_overrides(data, overrides))


def apply_overrides(data: dict, overrides) -> dict:
    data = copy.deepcopy(data)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        key, raw = item.split("=", 1)
        try:
            value = tomllib.loads(f"v = {raw}")["v"]
        except tomllib.TOMLDecodeError:
            value = raw
        node = data
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(key, "cannot override inside a non-table field")
        node[parts[-1]] = value
    return data


# -- cells --------------------------------------------------------------------


def cell_seed(base: int, cell: int, repeat: int) -> int:
    return int(np.random.SeedSequence([base, cell, repeat]).generate_state(1)[0])


def expand_cells(cfg: ExperimentConfig) -> list[dict]:
    """Jobs in their canonical order; each is a plain picklable dict."""
    jobs = []
    if cfg.suite is not None:
        count = int(cfg.suite.get("count", 20))
        K = int(cfg.suite.get("K", 5000))
        for cell in range(count):
            for rep in range(cfg.repeats):
                jobs.append({"cell": cell, "repeat": rep, "suite": {"count": count, "K": K, "seed": cfg.seed}, "algo": "normec", "thin": cfg.thin})
        return jobs
    keys = [k for k in GRID_KEYS if k in cfg.grid]
    combos = list(itertools.product(*(cfg.grid[k] for k in keys)))
    cell = 0
    for variant in cfg.variants:
        for combo in combos:
            params = dict(cfg.params)
            params.update({k: v for k, v in variant.items() if k != "algo"})
            params.update({k: v for k, v in zip(keys, combo) if k != "algo"})
            algo = dict(zip(keys, combo)).get("algo", variant.get("algo", cfg.algo))
            for rep in range(cfg.repeats):
                jobs.append(
                    {
                        "cell": cell,
                        "repeat": rep,
                        "algo": algo,
                        "params": params,
                        "problem": cfg.problem,
                        "privacy": cfg.privacy,
                        "seed": cell_seed(cfg.seed, cell, rep),
                        "thin": cfg.thin,
                    }
                )
            cell += 1
    return jobs


@lru_cache(maxsize=8)
def _cached_problem(spec_json: str):
    spec = json.loads(spec_json)
    return make_problem(spec.pop("kind"), **spec)


def _sensitivity(algo: str, params: dict) -> float:
    if algo in ("clip21", "dp-clip21", "dpsgd-clip"):
        if "tau" not in params:
            raise ValueError(f"{algo} needs tau to calibrate noise")
        return float(params["tau"])
    if algo == "ef21-topk":
        raise ValueError("ef21-topk has unbounded sensitivity; set params.sigma_dp explicitly")
    return 1.0


def build_run(job: dict):
    """Resolve a grid job into ``(problem, AlgoConfig)``."""
    if "suite" in job:
        s = job["suite"]
        problem, cfg = theorem1_suite(s["count"], s["K"], seed=s["seed"])[job["cell"]]
        return problem, cfg
    problem = _cached_problem(json.dumps(job["problem"], sort_keys=True))
    p = dict(job["params"])
    init = p.pop("init", "zero")
    radius = float(p.pop("init_radius", 0.5))
    rule = p.pop("step_rule", "fixed")
    fraction = float(p.pop("step_fraction", 1.0))
    policy = ZeroMemory() if init == "zero" else GradAtX0Perturbed(radius)
    privacy = job.get("privacy")
    if privacy and "sigma_dp" not in p:
        budget = DpBudget(
            eps=float(privacy["eps"]),
            delta=float(privacy["delta"]),
            K=int(p.get("K", 100)),
            n=problem.n,
            c=float(privacy.get("c", 1.0)),
            sensitivity=_sensitivity(job["algo"], p),
        )
        p["sigma_dp"] = calibrate_sigma(budget)
    p.setdefault("gamma", 1.0)
    cfg = AlgoConfig(init_policy=policy, seed=job["seed"], **p)
    if rule == "theorem1":
        R = realized_residual(problem, initial_state(problem, cfg))
        cfg = cfg.with_(gamma=fraction * theorem1_step_size(problem, R, cfg.alpha, cfg.beta))
    return problem, cfg


def run_cell(job: dict) -> dict:
    """Run one job; returns the summary row, CSV text and oracle report."""
    row = {c: "" for c in SUMMARY_COLUMNS}
    row.update(cell=job["cell"], repeat=job["repeat"], algo=job["algo"])
    try:
        problem, cfg = build_run(job)
    except (ValueError, TypeError, KeyError) as err:
        row.update(error=str(err), bound_check="ERROR", diverged=False)
        return {"row": row, "csv": None, "report": None}
    row.update(
        gamma=cfg.gamma,
        beta=cfg.beta,
        alpha=cfg.alpha,
        tau="" if cfg.tau is None else cfg.tau,
        sigma_dp=cfg.sigma_dp,
        K=cfg.K,
        seed=cfg.seed,
        problem_seed="" if getattr(problem, "seed", None) is None else problem.seed,
    )
    try:
        trace = run_safely(problem, cfg, job["algo"])
    except ValueError as err:
        row.update(error=str(err), bound_check="ERROR", diverged=False)
        return {"row": row, "csv": None, "report": None}
    s = trace.summary()
    row.update(
        rounds=s["rounds"],
        min_grad_norm=s["min_grad_norm"],
        final_grad_norm=s["final_grad_norm"],
        final_loss=s["final_loss"],
        best_round=s["best_round"],
        realized_R=s["realized_R"],
        conforming=s["conforming"],
        residual_violations=s["residual_violations"],
        diverged=s["diverged"],
        diverged_round="" if s["diverged_round"] is None else s["diverged_round"],
    )
    if isinstance(problem, LogisticProblem):
        row["accuracy"] = problem.accuracy(trace.final_state.x)

    report = None
    status = "N/A"
    if job["algo"] == "normec" and cfg.sigma_dp == 0 and not trace.diverged:
        rep = check_theorem1_bound(trace, problem, cfg)
        report = rep.to_dict()
        if rep.applicable:
            status = "PASS" if rep.passed else "FAIL"
            row["bound_margin"] = rep.margin
        else:
            status = "INAPPLICABLE"
    if trace.conforming and trace.residual_violations:
        status = "FAIL"
    if trace.conforming and trace.diverged:
        status = "FAIL"
    row["bound_check"] = status
    return {"row": row, "csv": trace.to_csv(job["thin"]), "report": report}


# -- output -------------------------------------------------------------------


def resolve_output_dir(cfg: ExperimentConfig, output_dir=None) -> Path:
    if output_dir is not None:
        return Path(output_dir)
    if cfg.output_dir is not None:
        return Path(cfg.output_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT)
    return Path(root) / cfg.name


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _cell_stem(job: dict) -> str:
    return f"cell-{job['cell']:04d}-r{job['repeat']:02d}"


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_summary(rows: list[dict], out_dir) -> tuple[Path, Path]:
    """Write ``summary.csv`` and ``summary.json`` (rows sorted by cell, repeat)."""
    if not rows:
        raise ValueError("no completed runs to summarize")
    out_dir = Path(out_dir)
    rows = sorted(rows, key=lambda r: (r["cell"], r["repeat"]))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SUMMARY_COLUMNS)
    for r in rows:
        writer.writerow([_format(r[c]) for c in SUMMARY_COLUMNS])
    csv_path, json_path = out_dir / "summary.csv", out_dir / "summary.json"
    try:
        _atomic_write(csv_path, buf.getvalue())
        payload = {
            "columns": list(SUMMARY_COLUMNS),
            "rows": [{c: _json_safe(r[c]) for c in SUMMARY_COLUMNS} for r in rows],
            "failures": sum(r["bound_check"] == "FAIL" for r in rows),
        }
        _atomic_write(json_path, json.dumps(payload, indent=2) + "\n")
    except OSError as err:
        raise OSError(f"could not write summary under {out_dir}: {err}") from err
    return csv_path, json_path


def _json_safe(value):
    if isinstance(value, float) and not math.isfinite(value):
        return repr(value)
    return value


@dataclass
class ExperimentResult:
    out_dir: Path
    rows: list[dict]

    @property
    def failures(self) -> int:
        return sum(r["bound_check"] == "FAIL" for r in self.rows)

    @property
    def exit_code(self) -> int:
        return 0 if self.failures == 0 else 1


def run_experiment(cfg: ExperimentConfig, output_dir=None, *, workers: int = 1, resume: bool = False, overwrite: bool = False) -> ExperimentResult:
    """Execute every cell, writing per-run files as they finish.

    An existing non-empty output directory is refused unless ``resume`` (skip
    cells with a finished ``.json``) or ``overwrite`` (delete it first).
    """
    out = resolve_output_dir(cfg, output_dir)
    resolved = json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"
    resolved_path = out / "config.resolved.json"
    if out.exists() and any(out.iterdir()):
        if overwrite:
            shutil.rmtree(out)
        elif not resume:
            raise OutputDirError(f"{out} is not empty; pass --resume to continue or --overwrite to replace it")
        elif not resolved_path.exists() or resolved_path.read_text() != resolved:
            raise OutputDirError(f"{out} holds results for a different config; refusing to resume")
    runs_dir = out / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)
    _atomic_write(resolved_path, resolved)

    jobs = expand_cells(cfg)
    rows, pending = [], []
    for job in jobs:
        done = runs_dir / f"{_cell_stem(job)}.json"
        if resume and done.exists():
            rows.append(json.loads(done.read_text())["row"])
        else:
            pending.append(job)

    def store(job, result):
        stem = _cell_stem(job)
        if result["csv"] is not None:
            _atomic_write(runs_dir / f"{stem}.csv", result["csv"])
        record = {"row": {k: _json_safe(v) for k, v in result["row"].items()}, "report": result["report"]}
        # The JSON record is written last and marks the cell as finished.
        _atomic_write(runs_dir / f"{stem}.json", json.dumps(record, indent=2, default=float) + "\n")
        rows.append(result["row"])

    if workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for job, result in zip(pending, pool.map(run_cell, pending)):
                store(job, result)
    else:
        for job in pending:
            store(job, run_cell(job))

    emit_summary(rows, out)
    return ExperimentResult(out, sorted(rows, key=lambda r: (r["cell"], r["repeat"])))
