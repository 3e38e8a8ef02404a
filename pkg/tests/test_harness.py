"""
Tests for experiment configs, paired Monte-Carlo runs, reports and case studies.
"""

from pathlib import Path
from unittest.mock import patch

import numpy as np
import pandas as pd
import pytest

from src.baselines import solve_edge_gs
from src.config import settings
from src.errors import SolverError, ValidationFailure
from src.harness import (
    SOLVER_NAMES,
    case_study,
    check_pairing,
    compare_solvers,
    format_table,
    ilo_timing_sweep,
    load_experiment_config,
    parse_experiment_config,
    resolve_solvers,
    run_experiment,
    run_solver,
    scenario_from_profile,
)
from data.scenario_profiles import list_profiles
from tests.conftest import make_instance

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"

SMALL_RUN = {
    "profile": "desk-small",
    "scenario": {"num_users": 6, "max_collab": 3},
    "power_sweep": [0.01, 0.02],
    "solvers": ["pmm", "user_gs", "greedy", "edge_gs"],
    "num_runs": 3,
    "workers": 1,
}


@pytest.fixture(scope="module")
def small_report(tmp_path_factory):
    cfg = parse_experiment_config(SMALL_RUN)
    return run_experiment(cfg, tmp_path_factory.mktemp("small"))


class TestExperimentConfig:
    """Parsing and validating sweep definitions."""

    def test_profile_and_overrides(self):
        """Scenario overrides are applied on top of the profile."""
        cfg = parse_experiment_config(SMALL_RUN)
        assert cfg.scenario.num_users == 6
        assert cfg.scenario.max_collab == 3
        assert cfg.scenario.seed == 7

    def test_unknown_solver(self):
        """Unknown solver names are rejected up front."""
        with pytest.raises(ValidationFailure) as exc_info:
            parse_experiment_config({"profile": "desk-small", "solvers": ["pmm", "magic"]})
        assert "magic" in str(exc_info.value)

    def test_ilo_needs_model(self):
        """The fast path cannot run without a trained model."""
        with pytest.raises(ValidationFailure):
            parse_experiment_config({"profile": "desk-small", "solvers": ["ilo"]})

    def test_unknown_profile(self):
        """Profiles must exist."""
        with pytest.raises(ValidationFailure):
            parse_experiment_config({"profile": "nowhere"})

    def test_milliwatt_sweep(self):
        """power_sweep_mw is converted to watts."""
        cfg = parse_experiment_config({"profile": "desk-small", "power_sweep_mw": [10, 20]})
        assert cfg.power_sweep == pytest.approx([0.01, 0.02])

    def test_dbm_sweep(self):
        """power_sweep_dbm is converted to watts."""
        cfg = parse_experiment_config({"profile": "desk-small", "power_sweep_dbm": [10, 20]})
        assert cfg.power_sweep == pytest.approx([0.01, 0.1])

    def test_base_seed_overrides_scenario_seed(self):
        """base_seed reseeds the scenario stream."""
        cfg = parse_experiment_config({"profile": "desk-small", "base_seed": 99})
        assert cfg.resolved_scenario.seed == 99

    def test_shipped_configs_load(self):
        """Bundled YAML configs are valid."""
        reference = load_experiment_config(CONFIG_DIR / "paper_truck.yaml")
        assert reference.scenario.num_users == 20
        assert reference.power_sweep == pytest.approx([0.01, 0.02, 0.03, 0.04])
        desk = load_experiment_config(CONFIG_DIR / "desk_small.yaml")
        assert "brute_force" in desk.solvers

    def test_bad_yaml(self, tmp_path):
        """Unparsable YAML raises ValidationFailure."""
        path = tmp_path / "bad.yaml"
        path.write_text("solvers: [pmm\n")
        with pytest.raises(ValidationFailure):
            load_experiment_config(path)

    def test_top_level_must_be_mapping(self, tmp_path):
        """A YAML list is not a config."""
        path = tmp_path / "list.yaml"
        path.write_text("- pmm\n- greedy\n")
        with pytest.raises(ValidationFailure):
            load_experiment_config(path)


class TestSolverResolution:
    """Name lookup and feasibility enforcement."""

    def test_every_name_but_ilo_resolves(self):
        """All built-in solvers are available without a model."""
        names = [n for n in SOLVER_NAMES if n != "ilo"]
        assert list(resolve_solvers(names)) == names

    def test_unknown_name(self):
        """Unknown names fail before running."""
        with pytest.raises(ValidationFailure):
            resolve_solvers(["pmm", "nope"])

    def test_workers_capped_by_thread_setting(self, tmp_path, monkeypatch):
        """IRAC_THREADS caps an explicit workers request."""
        monkeypatch.setattr(settings, "irac_threads", 1)
        assert settings.cap_workers(8) == 1
        assert settings.cap_workers(None) == 1
        cfg = parse_experiment_config({**SMALL_RUN, "workers": 4, "num_runs": 2})
        with patch("src.harness.ProcessPoolExecutor", side_effect=AssertionError("pool used")):
            report = run_experiment(cfg, tmp_path)
        assert len(report.runs) == 2 * 4 * 2

    def test_infeasible_result_raises(self):
        """Only exempt baselines may return infeasible decisions."""
        inst = make_instance([0.02] * 4, [1e-5] * 4, power_budget=0.01)
        with pytest.raises(SolverError):
            run_solver("greedy", solve_edge_gs, inst)
        assert not run_solver("edge_gs", solve_edge_gs, inst).feasibility.feasible


class TestRunExperiment:
    """Paired Monte-Carlo sweeps."""

    def test_row_count_and_files(self, small_report):
        """One row per (power, solver, run) and all four report files."""
        assert len(small_report.runs) == 2 * 4 * 3
        assert sorted(p.name for p in small_report.files) == [
            "report.json",
            "runs.csv",
            "summary.csv",
            "timings.csv",
        ]
        assert all(p.exists() for p in small_report.files)
        assert len(small_report.summary) == 2 * 4

    def test_rows_are_ordered(self, small_report):
        """Rows are sorted by power, configured solver order, then run."""
        runs = small_report.runs
        first = runs[runs["power_budget"] == 0.01]
        assert first["solver"].tolist()[:3] == ["pmm"] * 3
        assert first["run"].tolist()[:3] == [0, 1, 2]

    def test_local_loss_ignores_budget(self, small_report):
        """UserGS never transmits, so its loss depends only on the run."""
        local = small_report.runs[small_report.runs["solver"] == "user_gs"]
        assert (local.groupby("run")["total_loss"].nunique() == 1).all()

    def test_pmm_beats_all_local(self, small_report):
        """Paired PMM objective never exceeds the all-local objective."""
        runs = small_report.runs
        pmm = runs[runs["solver"] == "pmm"].set_index(["power_budget", "run"])
        local = runs[runs["solver"] == "user_gs"].set_index(["power_budget", "run"])
        joined = pmm.join(local, lsuffix="_pmm", rsuffix="_local")
        assert (joined["objective_P1_pmm"] <= joined["objective_P1_local"] + 1e-12).all()

    def test_instances_are_paired(self, small_report):
        """All solvers of one (power, run) cell share an instance hash."""
        check_pairing(small_report.runs)
        tampered = small_report.runs.copy()
        tampered.loc[0, "instance_hash"] = "0" * 64
        with pytest.raises(SolverError):
            check_pairing(tampered)

    def test_deterministic_bytes(self, small_report, tmp_path):
        """A second invocation reproduces runs.csv and summary.csv exactly."""
        again = run_experiment(parse_experiment_config(SMALL_RUN), tmp_path)
        by_name = {p.name: p for p in small_report.files}
        for name in ("runs.csv", "summary.csv"):
            assert (tmp_path / name).read_bytes() == by_name[name].read_bytes()
        pd.testing.assert_frame_equal(again.summary, small_report.summary)

    def test_csv_float_format(self, small_report):
        """Floats are written with nine significant digits."""
        text = next(p for p in small_report.files if p.name == "runs.csv").read_text()
        header = text.splitlines()[0]
        assert header.startswith("power_budget,solver,run,instance_hash,objective_P1")

    def test_timing_summary(self, small_report):
        """Timing summary has one row per (solver, power)."""
        assert len(small_report.timing_summary()) == 2 * 4
        assert (small_report.timings["wall_time"] >= 0).all()


class TestCompareAndCaseStudy:
    """Single-instance reports."""

    def test_compare_bounded_by_oracle(self, small_instance):
        """No solver beats brute force."""
        frame = compare_solvers(small_instance, ["pmm", "greedy", "brute_force"])
        best = frame.loc[frame["solver"] == "brute_force", "objective_P1"].item()
        assert (frame["objective_P1"] >= best - 1e-9).all()
        assert "wall_time_ms" not in frame.columns

    def test_compare_timing_column(self, small_instance):
        """timing=True adds wall times."""
        frame = compare_solvers(small_instance, ["greedy"], timing=True)
        assert "wall_time_ms" in frame.columns
        assert "greedy" in format_table(frame)

    def test_constructed_case(self):
        """Greedy serves the far user, PMM does not, UserGS serves nobody."""
        cfg = parse_experiment_config(
            {"profile": "desk-small", "solvers": ["greedy", "pmm", "user_gs"]}
        )
        frame = case_study(cfg, constructed=True)
        assert list(frame.columns[:3]) == ["user", "switching_gain", "channel_gain"]
        assert frame["x_greedy"].iloc[0] == 1
        assert frame["x_pmm"].iloc[0] == 0
        assert (frame["x_user_gs"] == 0).all()
        for name in ("greedy", "pmm", "user_gs"):
            np.testing.assert_array_equal(frame[f"p_{name}"] > 0, frame[f"x_{name}"] == 1)

    def test_random_case_uses_last_budget(self):
        """Without an explicit budget the largest sweep value is used."""
        cfg = parse_experiment_config(
            {"profile": "desk-small", "solvers": ["greedy"], "power_sweep": [0.01, 0.05]}
        )
        frame = case_study(cfg, run_index=2)
        assert len(frame) == cfg.scenario.num_users


ORDERING_RUN = {
    "profile": "desk-small",
    "power_sweep": [0.005, 0.01],
    "solvers": ["pmm", "rounding", "local_search", "greedy", "max_rate", "brute_force"],
    "num_runs": 8,
    "workers": 1,
}


def _paired(runs: pd.DataFrame, metric: str) -> pd.DataFrame:
    """One column per solver, one row per (power, run)."""
    return runs.pivot(index=["power_budget", "run"], columns="solver", values=metric)


class TestSolverOrdering:
    """Paired comparison of PMM against the heuristics on oracle-sized scenes."""

    @pytest.fixture(scope="class")
    def objectives(self, tmp_path_factory):
        report = run_experiment(
            parse_experiment_config(ORDERING_RUN), tmp_path_factory.mktemp("ordering")
        )
        return _paired(report.runs, "objective_P1")

    def test_pmm_bounded_by_oracle_and_rounding(self, objectives):
        """Per instance: oracle <= PMM <= rounded relaxation."""
        assert (objectives["pmm"] >= objectives["brute_force"] - 1e-9).all()
        assert (objectives["pmm"] <= objectives["rounding"] + 1e-12).all()

    def test_local_search_never_worse_than_greedy(self, objectives):
        """Local search starts from the greedy admission."""
        assert (objectives["local_search"] <= objectives["greedy"] + 1e-12).all()

    def test_pmm_mean_beats_heuristics(self, objectives):
        """On average PMM is at least as good as every heuristic at each budget."""
        means = objectives.groupby(level="power_budget").mean()
        for other in ("local_search", "greedy", "max_rate", "rounding"):
            assert (means["pmm"] <= means[other] + 1e-12).all(), other


@pytest.mark.slow
def test_reference_sweep_ordering(tmp_path):
    """Full sweep: loss ordering, gains over all-local at 40 mW, deadlines at 10 mW."""
    cfg = parse_experiment_config(
        {
            "profile": "paper-truck",
            "solvers": [
                "pmm",
                "user_gs",
                "edge_gs",
                "max_rate",
                "greedy",
                "rounding",
                "local_search",
            ],
            "num_runs": 100,
        }
    )
    report = run_experiment(cfg, tmp_path)
    loss = _paired(report.runs, "total_loss").groupby(level="power_budget").mean()
    for power in cfg.power_sweep:
        row = loss.loc[power]
        assert row["pmm"] <= row["local_search"] + 1e-12
        assert row["local_search"] <= row["greedy"] + 1e-12
        assert row["pmm"] <= row["rounding"] + 1e-12
        assert row["pmm"] <= row["max_rate"] + 1e-12

    top = max(cfg.power_sweep)
    assert (loss.loc[top, "user_gs"] - loss.loc[top, "pmm"]) / loss.loc[top, "user_gs"] >= 0.10
    psnr = _paired(report.runs, "mean_psnr").groupby(level="power_budget").mean()
    assert psnr.loc[top, "pmm"] - psnr.loc[top, "user_gs"] >= 1.0

    latency = _paired(report.runs, "max_latency").loc[min(cfg.power_sweep)]
    assert (latency["edge_gs"] > 0.060).mean() >= 0.7
    assert (latency["pmm"] <= 0.060 * (1 + 1e-9)).all()


def test_scenario_profile_lookup():
    """Named profiles resolve to validated scenarios."""
    scenario = scenario_from_profile("paper-truck", {"num_users": 12})
    assert scenario.num_users == 12
    assert scenario.max_collab == 10
    assert settings.default_profile == "paper-truck"


def test_profile_alias_resolves():
    """The old profile name maps to the same scenario but is not listed."""
    assert scenario_from_profile("reference-k20") == scenario_from_profile("paper-truck")
    assert "reference-k20" not in list_profiles()
    assert "paper-truck" in list_profiles()


def test_timing_sweep_rejects_empty_user_list():
    """No user counts is a validation failure before any labelling."""
    with pytest.raises(ValidationFailure):
        ilo_timing_sweep(scenario_from_profile("desk-small"), [], n_train=2, n_test=2)
