import json

import pytest

from llga.cli import (
    EXIT_OK,
    EXIT_RUNTIME,
    EXIT_USAGE,
    EXIT_VALIDATION,
    ExperimentManifest,
    OUTPUT_ROOT_ENV,
    load_artifact_policy,
    main,
    resolve_policy,
)
from llga.policies import (
    CompositePolicy,
    SelfAdjustingPolicy,
    TablePolicy,
    TheoryPolicy,
    TwoPhasePolicy,
    UShapeAlphaPolicy,
)


@pytest.fixture()
def outdir(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    return tmp_path


class TestPolicyResolution:
    def test_formula_identifiers(self):
        assert isinstance(resolve_policy("theory"), TheoryPolicy)
        assert isinstance(resolve_policy("two_phase"), TwoPhasePolicy)
        assert isinstance(resolve_policy("ushape"), UShapeAlphaPolicy)

    def test_self_adjusting_identifiers(self):
        tuned = resolve_policy("tuned")
        assert isinstance(tuned, SelfAdjustingPolicy)
        assert tuned.config.plateau == "hold"
        fifth = resolve_policy("one_fifth:2.0")
        assert fifth.config.dec_factor == pytest.approx(0.5)
        assert resolve_policy("one_fifth").config.dec_factor == pytest.approx(1 / 1.5)
        custom = resolve_policy("self_adjusting:alpha=0.5,lambda_init=4")
        assert custom.config.alpha == 0.5 and custom.config.lambda_init == 4.0

    def test_composite_and_ablation(self):
        comp = resolve_policy("composite:lambda_m=staged,alpha=0.25")
        assert isinstance(comp, CompositePolicy)
        assert comp.sources == ("staged", 0.25, "theory", "theory")
        full = resolve_policy("ablation:full")
        assert full.sources == ("staged", "staged", "staged", "theory")

    def test_table_identifier(self, tmp_path):
        path = tmp_path / "p.csv"
        from llga.policies import write_policy_table

        write_policy_table(TheoryPolicy(), 8, path)
        pol = resolve_policy(f"table:{path}")
        assert isinstance(pol, TablePolicy) and pol.n == 8

    def test_unknown_ids_list_candidates(self, capsys):
        from llga.cli import UsageError

        with pytest.raises(UsageError, match="two_phase"):
            resolve_policy("dmp")
        with pytest.raises(UsageError, match="known"):
            resolve_policy("ablation:bogus")
        with pytest.raises(UsageError):
            resolve_policy("one_fifth:abc")
        with pytest.raises(UsageError):
            resolve_policy("self_adjusting:plateau")
        with pytest.raises(UsageError):
            resolve_policy("composite:gamma=1")


class TestExitCodes:
    def test_success(self, outdir):
        assert main(["run", "--policy", "theory", "--n", "16", "--runs", "4"]) == EXIT_OK

    def test_usage_errors(self, outdir, capsys):
        assert main(["run", "--policy", "nope", "--runs", "4"]) == EXIT_USAGE
        assert "known forms" in capsys.readouterr().err
        assert main(["run", "--policy", "theory", "--runs", "0"]) == EXIT_USAGE
        assert main(["run", "--runs", "4"]) == EXIT_USAGE
        assert main(["ablate", "--ablation", "rl"]) == EXIT_USAGE
        assert main([]) == EXIT_USAGE  # argparse: missing subcommand
        assert main(["run", "--bogus-flag"]) == EXIT_USAGE

    def test_validation_errors(self, outdir, tmp_path, capsys):
        missing = tmp_path / "nope.csv"
        assert main(
            ["run", "--policy", f"table:{missing}", "--runs", "4"]
        ) == EXIT_VALIDATION
        assert main(
            ["run", "--policy", "theory", "--n", "1", "--runs", "4"]
        ) == EXIT_VALIDATION

        manifest = tmp_path / "man.json"
        manifest.write_text('{"bogus_key": 1}')
        assert main(["run", "--manifest", str(manifest)]) == EXIT_VALIDATION
        assert "bogus_key" in capsys.readouterr().err

        manifest.write_text("{not json")
        assert main(["run", "--manifest", str(manifest)]) == EXIT_VALIDATION

    def test_version_and_help_exit_zero(self, capsys):
        assert main(["--version"]) == 0
        assert "v0.1." in capsys.readouterr().out
        assert main(["--help"]) == 0


class TestRunCommand:
    def test_writes_json_and_csv(self, outdir, capsys):
        rc = main([
            "run", "--policy", "theory", "--n", "20", "--runs", "6",
            "--master-seed", "3",
        ])
        assert rc == EXIT_OK
        stem = "run_theory_n20_s6_v0.1.0"
        payload = json.loads((outdir / f"{stem}.json").read_text())
        assert payload["runs"] == 6 and payload["n"] == 20
        assert payload["master_seed"] == 3
        assert len(payload["per_seed_evaluations"]) == 6
        lines = (outdir / f"{stem}.csv").read_text().splitlines()
        assert lines[0] == "seed,evaluations,success"
        assert len(lines) == 7
        assert "normalized ERT" in capsys.readouterr().out

    def test_idempotent(self, outdir, capsys):
        args = ["run", "--policy", "tuned", "--n", "18", "--runs", "5"]
        assert main(args) == EXIT_OK
        stem = "run_tuned_n18_s5_v0.1.0"
        first = {p.name: p.read_bytes() for p in outdir.iterdir()}
        assert main(args) == EXIT_OK
        second = {p.name: p.read_bytes() for p in outdir.iterdir()}
        assert first == second
        assert f"{stem}.json" in first

    def test_manifest_with_flag_override(self, outdir, tmp_path, capsys):
        manifest = tmp_path / "m.json"
        manifest.write_text(json.dumps({
            "policies": ["theory"], "ns": [16], "runs": 50, "master_seed": 2,
        }))
        rc = main(["run", "--manifest", str(manifest), "--runs", "7"])
        assert rc == EXIT_OK
        assert (outdir / "run_theory_n16_s7_v0.1.0.json").exists()


class TestCompareAndTable:
    def test_compare_outputs(self, outdir, capsys):
        rc = main([
            "compare", "--policy", "theory", "--policy", "tuned",
            "--n", "20", "--runs", "8", "--parallel", "1",
        ])
        assert rc == EXIT_OK
        stem = "compare_theory+tuned_n20_s8_v0.1.0"
        assert (outdir / f"{stem}.csv").exists()
        assert (outdir / f"{stem}.txt").exists()
        payload = json.loads((outdir / f"{stem}.json").read_text())
        assert len(payload["cells"]) == 2
        out = capsys.readouterr().out
        assert "*" in out  # best marker in the echoed table

    def test_table_presets(self, outdir, capsys):
        rc = main(["table", "--which", "ablation", "--n", "16", "--runs", "6"])
        assert rc == EXIT_OK
        payload = json.loads(
            (outdir / "table_ablation_n16_s6_v0.1.0.json").read_text()
        )
        ids = [c["policy"] for c in payload["cells"]]
        assert ids == [
            "ablation:theory", "ablation:lm", "ablation:alpha", "ablation:lc",
            "ablation:alpha_lc", "ablation:lm_lc", "ablation:full",
        ]


class TestAblateCommand:
    def test_symbolic_rows(self, outdir, capsys):
        rc = main(["ablate", "--n", "16", "--runs", "6", "--parallel", "1"])
        assert rc == EXIT_OK
        payload = json.loads(
            (outdir / "ablate_symbolic_n16_s6_v0.1.0.json").read_text()
        )
        assert len(payload["cells"]) == 7


class TestExportCommand:
    def test_policy_tables_and_plotdata(self, outdir, capsys):
        rc = main([
            "export", "--policy", "two_phase", "--policy", "tuned",
            "--n", "40", "--runs", "4",
        ])
        assert rc == EXIT_OK
        table = (outdir / "policy_two_phase_n40_v0.1.0.csv").read_text().splitlines()
        assert len(table) == 41
        assert table[0] == "fx,lambda_m,alpha,lambda_c,beta"
        # self-adjusting policies cannot be tabulated per fitness level
        assert not (outdir / "policy_tuned_n40_v0.1.0.csv").exists()
        assert "history-dependent" in capsys.readouterr().out
        plot = (outdir / "plotdata_n40_s4_v0.1.0.csv").read_text().splitlines()
        assert plot[0] == "policy,n,normalized_ert"
        assert len(plot) == 3

    def test_stage_breakpoint_visible(self, outdir, capsys):
        assert main(["export", "--policy", "two_phase", "--n", "100",
                     "--runs", "2"]) == EXIT_OK
        rows = (outdir / "policy_two_phase_n100_v0.1.0.csv").read_text().splitlines()
        fx95 = rows[96].split(",")
        fx96 = rows[97].split(",")
        assert (fx95[1], fx95[2]) == ("1", "0.001")
        assert fx96[2] == "1.0"


TRAIN_DICT = {
    "n": 16,
    "buffer_capacity": 1_000,
    "warmup_transitions": 200,
    "batch_size": 16,
    "budget_steps": 200,
    "target_sync_period": 50,
    "eval_interval": 100,
    "eval_runs": 4,
    "reeval_runs": 4,
    "top_k": 1,
    "hidden": [8, 8],
}


class TestTrainCommand:
    def _manifest(self, tmp_path, extra=None):
        man = {"train": dict(TRAIN_DICT), "repetitions": 2, "master_seed": 4}
        man.update(extra or {})
        path = tmp_path / "train.json"
        path.write_text(json.dumps(man))
        return str(path)

    def test_artifacts_and_best_of(self, outdir, tmp_path, capsys):
        rc = main(["train", "--manifest", self._manifest(tmp_path),
                   "--parallel", "1"])
        assert rc == EXIT_OK
        run_dir = outdir / "train_factored_adaptive_shift_n16_s4_v0.1.0"
        for rep in (0, 1):
            rep_dir = run_dir / f"rep{rep}"
            curve = (rep_dir / "learning_curve.csv").read_text().splitlines()
            assert curve[0] == "step,eval_ert_mean,eval_ert_std"
            assert [row.split(",")[0] for row in curve[1:]] == ["100", "200"]
            assert (rep_dir / "model.npz").exists()
            assert (rep_dir / "policy.csv").exists()
            meta = json.loads((rep_dir / "meta.json").read_text())
            assert meta["repetition"] == rep
            assert meta["config"]["n"] == 16
        best = json.loads((run_dir / "best.json").read_text())
        assert len(best["repetitions"]) == 2
        assert (run_dir / "best_policy.csv").exists()

        # a written repetition round-trips as a model-backed policy
        policy = load_artifact_policy(run_dir / "rep0")
        assert policy.n == 16
        rc = main(["run", "--policy", f"model:{run_dir / 'rep0'}",
                   "--n", "16", "--runs", "3"])
        assert rc == EXIT_OK

    def test_deterministic_curves(self, outdir, tmp_path, capsys):
        man = self._manifest(tmp_path)
        assert main(["train", "--manifest", man, "--parallel", "1"]) == EXIT_OK
        run_dir = outdir / "train_factored_adaptive_shift_n16_s4_v0.1.0"
        first = (run_dir / "rep0" / "learning_curve.csv").read_bytes()
        assert main(["train", "--manifest", man, "--parallel", "1"]) == EXIT_OK
        assert (run_dir / "rep0" / "learning_curve.csv").read_bytes() == first

    def test_flag_overrides_train_dict(self, outdir, tmp_path, capsys):
        rc = main([
            "train", "--manifest", self._manifest(tmp_path),
            "--budget-steps", "100", "--repetitions", "1", "--parallel", "1",
        ])
        assert rc == EXIT_OK
        run_dir = outdir / "train_factored_adaptive_shift_n16_s4_v0.1.0"
        curve = (run_dir / "rep0" / "learning_curve.csv").read_text().splitlines()
        assert [row.split(",")[0] for row in curve[1:]] == ["100"]
        assert not (run_dir / "rep1").exists()

    def test_invalid_train_config(self, outdir, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"train": {"gamma": 1.5, "n": 16}}))
        assert main(["train", "--manifest", str(path)]) == EXIT_VALIDATION
        path.write_text(json.dumps({"train": {"nonsense_knob": 1}}))
        assert main(["train", "--manifest", str(path)]) == EXIT_VALIDATION


class TestRlAblation:
    def test_per_mask_training(self, outdir, tmp_path, capsys):
        man = tmp_path / "ab.json"
        man.write_text(json.dumps({
            "train": dict(TRAIN_DICT), "repetitions": 1, "master_seed": 6,
            "ablation": "rl", "masks": [["lambda_m"], ["lambda_m", "alpha"]],
        }))
        rc = main(["ablate", "--manifest", str(man), "--parallel", "1"])
        assert rc == EXIT_OK
        report = json.loads(
            (outdir / "ablate_rl_n16_s6_v0.1.0.json").read_text()
        )
        assert [row["mask"] for row in report["masks"]] == [
            ["lambda_m"], ["lambda_m", "alpha"],
        ]
        assert (outdir / "ablate_rl_lambda_m_n16_s6_v0.1.0" / "rep0" /
                "model.npz").exists()
        assert (outdir / "ablate_rl_lambda_m-alpha_n16_s6_v0.1.0" /
                "best_policy.csv").exists()


class TestManifest:
    def test_defaults(self):
        man = ExperimentManifest()
        assert man.runs == 1_000
        assert man.level == 0.01
        assert man.parallel == 0  # all cores

    def test_validation(self):
        with pytest.raises(Exception):
            ExperimentManifest(ablation="both").validate()
        with pytest.raises(Exception):
            ExperimentManifest(level=1.5).validate()
        with pytest.raises(Exception):
            ExperimentManifest(repetitions=0).validate()
