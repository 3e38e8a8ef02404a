"""
Experiment orchestration.

A run draws one instance from the scenario stream; every power budget of the
sweep and every solver sees that same instance (only P changes), so solver
comparisons are paired. Reports are written as:

    runs.csv      one row per (power, solver, run), deterministic bytes
    summary.csv   mean/std per (solver, power), deterministic bytes
    timings.csv   wall time per row (varies between invocations)
    report.json   summary + timing summary + the resolved config
"""

from __future__ import annotations

import json
import logging
from collections.abc import Callable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from data.scenario_profiles import FAR_USER_CASE, get_profile, list_profiles
from src.baselines import (
    solve_brute_force,
    solve_edge_gs,
    solve_greedy,
    solve_local_search,
    solve_max_rate,
    solve_rounding,
    solve_user_gs,
)
from src.config import settings
from src.errors import SolverError, ValidationFailure
from src.ilo import (
    MlpModel,
    TrainConfig,
    evaluate,
    generate_dataset,
    infer,
    load_model,
    split_dataset,
    train,
)
from src.instance import (
    Instance,
    ScenarioConfig,
    dbm_to_watts,
    generate_instance,
    instance_from_distances,
    validation_failure,
)
from src.metrics import evaluate_solution
from src.observability import trace_span
from src.pmm import PmmParams, Solution, pmm_solve

logger = logging.getLogger(__name__)

CSV_FLOAT_FORMAT = "%.9g"
SOLVER_NAMES = (
    "pmm",
    "user_gs",
    "edge_gs",
    "max_rate",
    "greedy",
    "rounding",
    "local_search",
    "brute_force",
    "ilo",
)
# Solvers allowed to return a Solution that violates the IRAC constraints.
INFEASIBLE_OK = frozenset({"edge_gs"})


def _watts(data: dict[str, Any], key: str) -> None:
    """Fold `<key>_mw` / `<key>_dbm` list or scalar variants into watts under `key`."""
    if f"{key}_mw" in data:
        value = data.pop(f"{key}_mw")
        data[key] = [v * 1e-3 for v in value] if isinstance(value, list) else value * 1e-3
    if f"{key}_dbm" in data:
        value = data.pop(f"{key}_dbm")
        data[key] = (
            [dbm_to_watts(v) for v in value] if isinstance(value, list) else dbm_to_watts(value)
        )


class ExperimentConfig(BaseModel):
    """Monte-Carlo sweep definition."""

    model_config = ConfigDict(frozen=True)

    scenario: ScenarioConfig = Field(default_factory=ScenarioConfig)
    power_sweep: list[float] = Field(default_factory=lambda: [0.010, 0.020, 0.030, 0.040])
    solvers: list[str] = Field(
        default_factory=lambda: ["pmm", "user_gs", "edge_gs", "max_rate", "greedy", "rounding", "local_search"]
    )
    num_runs: int = 100
    base_seed: int | None = None
    output_dir: str = "results"
    formats: list[str] = Field(default_factory=lambda: ["csv", "json"])
    model_path: str | None = None
    pmm: PmmParams = Field(default_factory=PmmParams)
    local_search_iters: int = 1000
    workers: int | None = None

    @model_validator(mode="before")
    @classmethod
    def _units(cls, data: Any) -> Any:
        if isinstance(data, dict):
            data = dict(data)
            _watts(data, "power_sweep")
        return data

    @model_validator(mode="after")
    def _check(self) -> ExperimentConfig:
        violations = []
        if self.num_runs < 1:
            violations.append("num_runs must be >= 1")
        if not self.power_sweep or any(not p > 0 for p in self.power_sweep):
            violations.append("power_sweep must be a non-empty list of positive watts")
        unknown = [s for s in self.solvers if s not in SOLVER_NAMES]
        if unknown:
            violations.append(f"unknown solvers {unknown}; known: {list(SOLVER_NAMES)}")
        if not self.solvers:
            violations.append("solvers must not be empty")
        if "ilo" in self.solvers and not self.model_path:
            violations.append("solver 'ilo' needs model_path")
        if any(f not in ("csv", "json") for f in self.formats):
            violations.append("formats must be drawn from ['csv', 'json']")
        if violations:
            raise ValueError("; ".join(violations))
        return self

    @property
    def resolved_scenario(self) -> ScenarioConfig:
        if self.base_seed is None:
            return self.scenario
        return self.scenario.model_copy(update={"seed": self.base_seed})


def scenario_from_profile(name: str, overrides: dict[str, Any] | None = None) -> ScenarioConfig:
    profile = get_profile(name)
    if profile is None:
        raise ValidationFailure(
            [f"unknown profile {name!r}; known: {list_profiles()}"], subject="scenario"
        )
    profile.update(overrides or {})
    return ScenarioConfig.from_dict(profile)


def parse_experiment_config(raw: dict[str, Any]) -> ExperimentConfig:
    """Resolve `profile` plus `scenario` overrides, then validate the whole config."""
    raw = dict(raw or {})
    profile = raw.pop("profile", settings.default_profile)
    scenario_overrides = raw.pop("scenario", {}) or {}
    raw["scenario"] = scenario_from_profile(profile, scenario_overrides)
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise validation_failure(exc, "experiment config") from exc


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ValidationFailure([f"YAML parse error: {exc}"], subject=str(path)) from exc
    if raw is not None and not isinstance(raw, dict):
        raise ValidationFailure(["top level must be a mapping"], subject=str(path))
    return parse_experiment_config(raw or {})


@lru_cache(maxsize=4)
def _cached_model(path: str) -> MlpModel:
    return load_model(path)


def resolve_solvers(
    names: Sequence[str],
    *,
    pmm_params: PmmParams | None = None,
    model_path: str | None = None,
    local_search_iters: int = 1000,
    seed: int = 0,
) -> dict[str, Callable[[Instance], Solution]]:
    """Map solver names to callables; unknown names fail before anything runs."""
    unknown = [n for n in names if n not in SOLVER_NAMES]
    if unknown:
        raise ValidationFailure(
            [f"unknown solver {n!r}" for n in unknown] + [f"known: {list(SOLVER_NAMES)}"],
            subject="solver list",
        )
    params = pmm_params or PmmParams()
    table: dict[str, Callable[[Instance], Solution]] = {
        "pmm": lambda inst: pmm_solve(inst, params),
        "user_gs": solve_user_gs,
        "edge_gs": solve_edge_gs,
        "max_rate": solve_max_rate,
        "greedy": solve_greedy,
        "rounding": solve_rounding,
        "local_search": lambda inst: solve_local_search(inst, local_search_iters, seed),
        "brute_force": solve_brute_force,
    }
    if "ilo" in names:
        if not model_path:
            raise ValidationFailure(["solver 'ilo' needs a model path"], subject="solver list")
        model = _cached_model(str(model_path))
        table["ilo"] = lambda inst: infer(model, inst)
    return {name: table[name] for name in names}


def run_solver(name: str, solver: Callable[[Instance], Solution], inst: Instance) -> Solution:
    """Run one solver and enforce feasibility for everyone but the exempt baselines."""
    solution = solver(inst)
    if name not in INFEASIBLE_OK and not solution.feasibility.feasible:
        raise SolverError(
            f"{name} returned an infeasible solution",
            diagnostics={"violations": solution.feasibility.violations[:5]},
        )
    return solution


def _run_cell(cfg: ExperimentConfig, run_index: int) -> tuple[list[dict], list[dict]]:
    """All (power, solver) rows of one run."""
    solvers = resolve_solvers(
        cfg.solvers,
        pmm_params=cfg.pmm,
        model_path=cfg.model_path,
        local_search_iters=cfg.local_search_iters,
        seed=run_index,
    )
    base = generate_instance(cfg.resolved_scenario, run_index)
    rows, timings = [], []
    for power in cfg.power_sweep:
        inst = base.with_budget(power)
        digest = inst.digest()
        for name, solver in solvers.items():
            solution = run_solver(name, solver, inst)
            metrics = evaluate_solution(inst, solution.x, solution.p)
            rows.append(
                {
                    "power_budget": power,
                    "solver": name,
                    "run": run_index,
                    "instance_hash": digest,
                    "objective_P1": solution.objective_P1,
                    "total_loss": metrics.total_loss,
                    "mean_psnr": metrics.mean_psnr,
                    "max_latency": metrics.max_latency,
                    "feasible": solution.feasibility.feasible,
                    "num_selected": len(solution.selected),
                    "iterations": solution.iterations,
                    "status": solution.status,
                }
            )
            timings.append(
                {"power_budget": power, "solver": name, "run": run_index, "wall_time": solution.wall_time}
            )
    return rows, timings


def _run_cell_task(task: tuple[ExperimentConfig, int]) -> tuple[list[dict], list[dict]]:
    return _run_cell(*task)


@dataclass
class ExperimentReport:
    runs: pd.DataFrame
    summary: pd.DataFrame
    timings: pd.DataFrame
    files: list[Path]

    def timing_summary(self) -> pd.DataFrame:
        return (
            self.timings.groupby(["solver", "power_budget"], sort=False)["wall_time"]
            .agg(["mean", "median", "max"])
            .reset_index()
        )


def _order_rows(frame: pd.DataFrame, solvers: Sequence[str]) -> pd.DataFrame:
    rank = {name: i for i, name in enumerate(solvers)}
    frame = frame.assign(_rank=frame["solver"].map(rank))
    keys = [k for k in ("power_budget", "_rank", "run") if k in frame.columns]
    frame = frame.sort_values(keys, kind="mergesort")
    return frame.drop(columns="_rank").reset_index(drop=True)


def summarize(runs: pd.DataFrame, solvers: Sequence[str]) -> pd.DataFrame:
    """Mean/std per (solver, power) of every per-run metric plus the feasibility rate."""
    metrics = ["total_loss", "mean_psnr", "max_latency", "objective_P1"]
    grouped = runs.groupby(["solver", "power_budget"], sort=False)
    summary = grouped[metrics].agg(["mean", "std"])
    summary.columns = [f"{metric}_{stat}" for metric, stat in summary.columns]
    summary["feasible_rate"] = grouped["feasible"].mean()
    summary["runs"] = grouped.size()
    summary = summary.reset_index()
    return _order_rows(summary, solvers)


def check_pairing(runs: pd.DataFrame) -> None:
    """Every solver of a (power, run) cell must have seen the identical instance."""
    distinct = runs.groupby(["power_budget", "run"])["instance_hash"].nunique()
    broken = distinct[distinct > 1]
    if not broken.empty:
        raise SolverError("paired-instance check failed", diagnostics={"cells": broken.index.tolist()[:5]})


def run_experiment(cfg: ExperimentConfig, output_dir: str | Path | None = None) -> ExperimentReport:
    out = Path(output_dir or cfg.output_dir)
    # Fail on bad solver names or a missing model before any computation.
    resolve_solvers(cfg.solvers, pmm_params=cfg.pmm, model_path=cfg.model_path)
    workers = min(settings.cap_workers(cfg.workers), cfg.num_runs)
    tasks = [(cfg, run) for run in range(cfg.num_runs)]

    with trace_span("run_experiment", runs=cfg.num_runs, workers=workers, solvers=len(cfg.solvers)):
        if workers <= 1:
            results = [_run_cell_task(t) for t in tasks]
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(_run_cell_task, tasks))

    rows = [row for cell_rows, _ in results for row in cell_rows]
    timing_rows = [row for _, cell_timings in results for row in cell_timings]
    runs = _order_rows(pd.DataFrame(rows), cfg.solvers)
    timings = _order_rows(pd.DataFrame(timing_rows), cfg.solvers)
    check_pairing(runs)
    summary = summarize(runs, cfg.solvers)
    report = ExperimentReport(runs=runs, summary=summary, timings=timings, files=[])

    out.mkdir(parents=True, exist_ok=True)
    if "csv" in cfg.formats:
        for name, frame in (("runs", runs), ("summary", summary), ("timings", timings)):
            path = out / f"{name}.csv"
            frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
            report.files.append(path)
    if "json" in cfg.formats:
        path = out / "report.json"
        document = {
            "config": cfg.model_dump(mode="json"),
            "summary": summary.to_dict(orient="records"),
            "timings": report.timing_summary().to_dict(orient="records"),
        }
        path.write_text(json.dumps(document, indent=2, default=float))
        report.files.append(path)
    logger.info("experiment finished: %d rows written to %s", len(runs), out)
    return report


def compare_solvers(
    inst: Instance,
    names: Sequence[str],
    *,
    timing: bool = False,
    pmm_params: PmmParams | None = None,
    model_path: str | None = None,
) -> pd.DataFrame:
    """One row per solver on a single instance."""
    solvers = resolve_solvers(names, pmm_params=pmm_params, model_path=model_path)
    rows = []
    for name, solver in solvers.items():
        solution = solver(inst)
        row = {
            "solver": name,
            "objective_P1": solution.objective_P1,
            "feasible": solution.feasibility.feasible,
            "selected": " ".join(str(k) for k in solution.selected) or "-",
            "status": solution.status,
        }
        if timing:
            row["wall_time_ms"] = solution.wall_time * 1e3
        rows.append(row)
    return pd.DataFrame(rows)


def format_table(frame: pd.DataFrame) -> str:
    return frame.to_string(index=False, float_format=lambda v: f"{v:.9g}")


def far_user_instance(scenario: ScenarioConfig | None = None) -> Instance:
    """One high-gain user at the cell edge plus several close users with smaller gains."""
    case = dict(FAR_USER_CASE)
    base = (scenario or ScenarioConfig()).model_copy(
        update={
            "num_antennas": case["num_antennas"],
            "pathloss_exponent": case["pathloss_exponent"],
            "power_budget": case["power_budget"],
            "max_collab": case["max_collab"],
            "num_users": len(case["switching_gain"]),
        }
    )
    return instance_from_distances(case["switching_gain"], case["distance"], base)


def case_study(
    cfg: ExperimentConfig,
    *,
    run_index: int = 0,
    power_budget: float | None = None,
    constructed: bool = False,
) -> pd.DataFrame:
    """Per-user x, L, gamma and p for each configured solver on one instance."""
    if constructed:
        inst = far_user_instance(cfg.resolved_scenario)
    else:
        inst = generate_instance(cfg.resolved_scenario, run_index)
        inst = inst.with_budget(power_budget if power_budget is not None else cfg.power_sweep[-1])
    solvers = resolve_solvers(
        cfg.solvers,
        pmm_params=cfg.pmm,
        model_path=cfg.model_path,
        local_search_iters=cfg.local_search_iters,
        seed=run_index,
    )
    frame = pd.DataFrame(
        {
            "user": np.arange(inst.num_users),
            "switching_gain": inst.gains,
            "channel_gain": inst.gamma,
        }
    )
    for name, solver in solvers.items():
        solution = run_solver(name, solver, inst)
        frame[f"x_{name}"] = np.asarray(solution.x, dtype=int)
        frame[f"p_{name}"] = solution.p
    return frame


def ilo_timing_sweep(
    scenario: ScenarioConfig,
    user_counts: Sequence[int],
    *,
    n_train: int,
    n_test: int,
    train_cfg: TrainConfig | None = None,
    seed: int = 0,
    workers: int | None = None,
    params: PmmParams | None = None,
    output: str | Path | None = None,
) -> pd.DataFrame:
    """
    Train one model per user count and time it against PMM on held-out instances.
    The collaboration cap scales with K so the S/K ratio of `scenario` is kept.
    """
    if not user_counts or min(user_counts) < 1:
        raise ValidationFailure(["user_counts must be a non-empty list of positive ints"], subject="timing sweep")
    if n_train < 1 or n_test < 1:
        raise ValidationFailure(["n_train and n_test must be >= 1"], subject="timing sweep")
    rows = []
    for K in user_counts:
        S = max(1, round(K * scenario.max_collab / scenario.num_users))
        config = scenario.model_copy(update={"num_users": K, "max_collab": S})
        with trace_span("ilo_timing_sweep", num_users=K, max_collab=S):
            build = generate_dataset(config, n_train + n_test, seed, params=params, workers=workers)
            train_set, test_set = split_dataset(build.samples, n_test / len(build.samples))
            model, _ = train(train_set, train_cfg)
            report = evaluate(model, test_set, timing_samples=len(test_set), params=params)
        rows.append(
            {
                "num_users": K,
                "max_collab": S,
                "train_samples": len(train_set),
                "test_samples": len(test_set),
                "bit_accuracy": report.bit_accuracy,
                "median_infer_seconds": report.median_infer_seconds,
                "median_pmm_seconds": report.median_pmm_seconds,
                "speedup": report.speedup,
            }
        )
        logger.info("timing sweep K=%d: speedup %.1fx", K, report.speedup or 0.0)
    frame = pd.DataFrame(rows)
    if output is not None:
        Path(output).parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(output, index=False, float_format=CSV_FLOAT_FORMAT)
    return frame
