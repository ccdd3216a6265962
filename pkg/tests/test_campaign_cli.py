import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest

import tripletopt.io as tio
from tripletopt.analysis import InfeasibilityStudyConfig
from tripletopt.campaign import (
    AnalysisSettings,
    CampaignConfig,
    ConfigError,
    analyze_campaign,
    config_from_dict,
    config_to_dict,
    load_campaign_config,
    run_campaign,
    save_campaign_config,
)
from tripletopt.cli import main
from tripletopt.niching import EvaluationRecord, NichingConfig
from tripletopt.refine import RefineResult, RefineSettings, Termination

from conftest import sample_feasible


def small_config(out_dir, runs=1, seed=424242):
    return CampaignConfig(
        niching=NichingConfig(budget=750, archive_depth=2),
        refine=RefineSettings(max_iter=60),
        analysis=AnalysisSettings(
            infeasibility=InfeasibilityStudyConfig(
                reps=5, subsample=50, k_minima=5, sw_subsample=200,
                rng_seed=7)),
        runs=runs, master_seed=seed, output_dir=str(out_dir))


@pytest.fixture(scope="module")
def campaign_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("campaign")
    cfg = small_config(out, runs=2)
    run_campaign(cfg)
    return out, cfg


class TestConfig:
    def test_round_trip(self, tmp_path):
        cfg = small_config(tmp_path)
        back = config_from_dict(config_to_dict(cfg))
        assert back.niching.budget == cfg.niching.budget
        assert back.analysis.infeasibility.reps == 5
        assert back.master_seed == cfg.master_seed

    def test_save_load(self, tmp_path):
        cfg = small_config(tmp_path)
        path = tmp_path / "cfg.json"
        save_campaign_config(cfg, path)
        back = load_campaign_config(path)
        assert config_to_dict(back) == config_to_dict(cfg)

    def test_missing_prescription_rejected(self, tmp_path):
        cfg = small_config(tmp_path)
        data = config_to_dict(cfg)
        data["prescription"] = str(tmp_path / "absent.json")
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(data))
        with pytest.raises(ConfigError):
            load_campaign_config(path)

    def test_invalid_values_rejected(self):
        with pytest.raises(ConfigError):
            config_from_dict({"niching": {"budget": -5}})


class TestRunArtifacts:
    def test_artifacts_exist(self, campaign_dir):
        out, cfg = campaign_dir
        for i in range(cfg.runs):
            rdir = out / f"run_{i + 1:02d}"
            for name in ("archive.csv", "refine.csv", "optima.csv",
                         "peaks.csv", "meta.json"):
                assert (rdir / name).is_file()

    def test_archive_counts_match_budget(self, campaign_dir):
        out, cfg = campaign_dir
        records = tio.read_archive(out / "run_01" / "archive.csv")
        gens = cfg.niching.budget // cfg.niching.evals_per_generation
        assert len(records) == gens * cfg.niching.evals_per_generation
        assert len(records) <= cfg.niching.budget

    def test_meta_consistent(self, campaign_dir):
        out, cfg = campaign_dir
        meta = json.loads((out / "run_01" / "meta.json").read_text())
        records = tio.read_archive(out / "run_01" / "archive.csv")
        assert meta["evaluations"] == len(records)
        assert meta["feasible_evaluations"] == sum(
            r.feasible for r in records)

    def test_minimal_run_refines_full_generation(self, tmp_path):
        # budget 250 with depth 1: one generation, all 250 records are
        # refinement candidates (feasible refined, infeasible skipped)
        cfg = dataclasses.replace(
            small_config(tmp_path / "minimal"),
            niching=NichingConfig(budget=250, archive_depth=1),
            refine=RefineSettings(max_iter=40))
        run_campaign(cfg)
        out = Path(cfg.output_dir) / "run_01"
        records = tio.read_archive(out / "archive.csv")
        assert len(records) == 250
        assert len({r.generation for r in records}) == 1
        results = tio.read_refine_results(out / "refine.csv")
        meta = json.loads((out / "meta.json").read_text())
        assert len(results) + meta["refine_skipped_infeasible"] == 250

    def test_rerun_is_byte_identical(self, campaign_dir, tmp_path):
        out, cfg = campaign_dir
        cfg2 = dataclasses.replace(cfg, output_dir=str(tmp_path / "again"),
                                   runs=1)
        run_campaign(cfg2)
        for name in ("archive.csv", "refine.csv", "optima.csv", "peaks.csv"):
            a = (out / "run_01" / name).read_bytes()
            b = (tmp_path / "again" / "run_01" / name).read_bytes()
            assert a == b, f"{name} differs between identical runs"


class TestAnalyze:
    def test_report_reconciles(self, campaign_dir):
        out, cfg = campaign_dir
        report = analyze_campaign(cfg)
        archives = [tio.read_archive(out / f"run_{i+1:02d}" / "archive.csv")
                    for i in range(cfg.runs)]
        vectors = np.concatenate(
            [np.stack([r.vector for r in arc]) for arc in archives])
        assert report.unique_total == len(np.unique(vectors, axis=0))
        assert report.unique_feasible + report.unique_infeasible \
            == report.unique_total
        assert 0.0 < report.fraction_infeasible < 1.0
        ana = out / "analysis"
        for name in report.manifest:
            assert (ana / name).is_file()

    def test_known_optima_matching(self, campaign_dir, tmp_path):
        out, cfg = campaign_dir
        run1_pts, run1_merits = tio.read_optima(out / "run_01" / "optima.csv")
        assert len(run1_pts) >= 1
        known = tmp_path / "known.csv"
        # one known point copied from run 1, one far corner never found
        far = np.full(6, 0.249)
        tio.write_optima(known, np.stack([run1_pts[0], far]),
                         np.array([run1_merits[0], 1.0]))
        report = analyze_campaign(cfg, known_optima=known)
        assert report.match_table is not None
        hit, missed = report.match_table
        assert hit["hit_runs"] >= 1
        assert hit["best_distance"] <= cfg.analysis.effective_match_tol
        assert missed["hit_runs"] == 0

    def test_single_point_distance_study_degenerates(self, tmp_path):
        cfg = small_config(tmp_path / "one")
        out = Path(cfg.output_dir)
        rdir = out / "run_01"
        rdir.mkdir(parents=True)
        rec = EvaluationRecord(vector=np.full(6, 0.01), merit=1.0,
                               feasible=False, generation=1, niche_id=0)
        tio.write_archive(rdir / "archive.csv", [rec])
        tio.write_refine_results(rdir / "refine.csv", [])
        tio.write_optima(rdir / "optima.csv",
                         np.full((1, 6), 0.02), np.array([0.5]))
        from tripletopt.niching import DynamicPeakSet
        tio.write_peaks(rdir / "peaks.csv", DynamicPeakSet([], 0.18))
        (rdir / "meta.json").write_text("{}")
        report = analyze_campaign(cfg)
        # one optimum: no pairwise distances, infeasibility study skipped
        assert len(report.found_points) == 1
        assert "infeasibility.csv" not in report.manifest
        assert (out / "analysis" / "distances_found.csv").read_text() \
            .strip() == ",".join(tio.DISTANCES_HEADER)


class TestIORoundTrips:
    def test_archive_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        recs = [EvaluationRecord(vector=rng.uniform(-0.25, 0.25, 6),
                                 merit=float(rng.uniform()),
                                 feasible=bool(i % 2), generation=1 + i // 3,
                                 niche_id=i % 5) for i in range(20)]
        path = tmp_path / "archive.csv"
        tio.write_archive(path, recs)
        back = tio.read_archive(path)
        for a, b in zip(recs, back):
            assert np.array_equal(a.vector, b.vector)
            assert a.merit == b.merit
            assert (a.feasible, a.generation, a.niche_id) \
                == (b.feasible, b.generation, b.niche_id)

    def test_refine_round_trip(self, tmp_path):
        res = [RefineResult(start=np.full(6, 0.1), refined=np.full(6, 0.09),
                            merit_before=1.5, merit_after=0.25,
                            iterations=17, converged=True,
                            termination=Termination.MERIT_STAGNATION)]
        path = tmp_path / "refine.csv"
        tio.write_refine_results(path, res)
        back = tio.read_refine_results(path)
        assert np.array_equal(back[0].refined, res[0].refined)
        assert back[0].termination is Termination.MERIT_STAGNATION
        assert back[0].merit_after == 0.25

    def test_known_optima_plain_text(self, tmp_path):
        path = tmp_path / "known.txt"
        path.write_text("# comment\n0.1 0.2 -0.1 0 0 0 0.5\n"
                        "0.0, 0.0, 0.0, 0.0, 0.0, 0.1\n")
        pts, merits = tio.read_known_optima(path)
        assert pts.shape == (2, 6)
        assert merits[0] == 0.5 and np.isnan(merits[1])


class TestCLI:
    def test_trace_all_flat(self, capsys):
        rc = main(["trace", "0", "0", "0", "0", "0", "0"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "infeasible" in out and "zero_power" in out

    def test_trace_feasible_counts(self, capsys, evaluator):
        c = sample_feasible(evaluator, 1)[0]
        rc = main(["trace"] + [repr(float(v)) for v in c])
        assert rc == 0
        out = capsys.readouterr().out
        ray_lines = [ln for ln in out.splitlines()
                     if ln and ln[0].isdigit()]
        assert len(ray_lines) == 126
        heights = {ln.split()[1] for ln in ray_lines}
        assert heights == {"0", "1", "2"}

    def test_trace_repeatable(self, capsys, evaluator):
        c = sample_feasible(evaluator, 1)[0]
        args = ["trace"] + [repr(float(v)) for v in c]
        main(args)
        first = capsys.readouterr().out
        main(args)
        second = capsys.readouterr().out
        assert first == second

    def test_usage_error_exit_1(self, capsys):
        assert main(["trace", "0.1"]) == 1
        assert main([]) == 1

    def test_config_error_exit_2(self, capsys, tmp_path):
        assert main(["run", "--config", str(tmp_path / "nope.json")]) == 2

    def test_domain_violation_exit_2(self, capsys):
        assert main(["trace", "0.4", "0", "0", "0", "0", "0"]) == 2

    def test_refine_and_classify(self, capsys, evaluator):
        c = sample_feasible(evaluator, 1)[0]
        rc = main(["refine"] + [repr(float(v)) for v in c])
        assert rc == 0
        out = capsys.readouterr().out
        assert "merit_after" in out and "termination" in out

        rc = main(["classify"] + [repr(float(v)) for v in c])
        assert rc == 0
        out = capsys.readouterr().out
        assert "verdict" in out and "gradient_norm" in out

    def test_trace_spot_chart(self, tmp_path, capsys, evaluator):
        c = sample_feasible(evaluator, 1)[0]
        chart = tmp_path / "spot.svg"
        rc = main(["trace", "--chart", str(chart)]
                  + [repr(float(v)) for v in c])
        assert rc == 0
        assert chart.is_file()
        assert chart.read_bytes().startswith(b"<?xml")

    def test_run_and_analyze_cli(self, tmp_path, capsys):
        cfgp = tmp_path / "c.json"
        save_campaign_config(small_config(tmp_path / "cli_out"), cfgp)
        assert main(["run", "--config", str(cfgp)]) == 0
        capsys.readouterr()
        assert main(["analyze", "--config", str(cfgp)]) == 0
        out = capsys.readouterr().out
        assert "deduplicated optima" in out
