import json
import os
import random

import numpy as np
import pytest

from unlearnaug import config as C
from unlearnaug import runner
from unlearnaug.augment import SCENARIOS
from unlearnaug.cli import apply_env_overrides, main
from unlearnaug.errors import ConfigError, InputError
from unlearnaug.report import (COLUMNS, RETRAIN, aggregate, build_rows, emit_report, read_csv_report, render,
                               write_reports)
from unlearnaug.runner import RunManifest, run_experiment, stage_key, verify


def tiny_config(tmp_path, **overrides):
    cfg = C.preset("desk").with_overrides(
        dataset__num_classes=3, dataset__per_class=6, dataset__test_per_class=4, dataset__image_shape=[3, 4, 4],
        arch__name="mlp", baseline__epochs=2, baseline__batch_size=8, unlearn__epochs=1, unlearn__batch_size=8,
        policies=["NoAug"], seeds=[0], output_dir=str(tmp_path / "run"))
    return cfg.with_overrides(**overrides) if overrides else cfg


def result(method, seed, ua, ra=50.0, ta=50.0, mia=50.0, policy="NoAug", value=0.5):
    return {"dataset": "synthetic", "method": method, "policy": policy, "forget_mode": "random",
            "forget_param": value, "seed": seed, "UA": ua, "RA": ra, "TA": ta, "MIA": mia, "RTE": 0.1}


class TestConfig:
    def test_desk_preset_values(self):
        cfg = C.preset("desk")
        assert cfg.dataset["kind"] == "synthetic" and cfg.methods == ["FT", "RL", "SalUn"]
        assert cfg.policies == ["NoAug", "Default+TrivialAug"] and cfg.seeds == [0, 1, 2]
        assert cfg.train_config("baseline", "NoAug", 0).epochs == 20

    def test_full_scale_presets(self):
        for name, k in (("full-cifar10", 10), ("full-cifar100", 100)):
            cfg = C.preset(name)
            assert cfg.arch().num_classes == k and cfg.policies == list(SCENARIOS)
            assert cfg.seeds == [0, 1, 2, 3, 4] and cfg.forget_values == [0.1, 0.5]

    @pytest.mark.parametrize("name", sorted(C.PRESETS))
    def test_roundtrip(self, name, tmp_path):
        cfg = C.preset(name)
        C.save(cfg, tmp_path / "c.toml")
        back = C.load(tmp_path / "c.toml")
        assert back.to_dict() == cfg.to_dict() and back.hash() == cfg.hash()

    def test_hash_stable_under_key_order(self):
        raw = C.preset("desk").to_dict()
        keys = list(raw)
        random.Random(0).shuffle(keys)
        shuffled = {k: raw[k] for k in keys}
        assert C.ExperimentConfig(shuffled).hash() == C.preset("desk").hash()
        assert C.preset("desk").with_overrides(seeds=[9]).hash() != C.preset("desk").hash()

    @pytest.mark.parametrize("override, path", [
        ({"methods": ["FT", "Bogus"]}, "methods[1]"),
        ({"dataset__kind": "mnist"}, "dataset.kind"),
        ({"forget__values": [1.5]}, "forget.values[0]"),
        ({"baseline__lr": 0}, "baseline.lr"),
        ({"policies": ["Default+Mixup"]}, "policies[0]"),
        ({"seeds": [-1]}, "seeds[0]"),
        ({"schema": 2}, "schema"),
        ({"dataset__extra": 1}, "dataset.extra"),
    ])
    def test_schema_errors_name_the_field(self, override, path):
        with pytest.raises(ConfigError) as err:
            C.preset("desk").with_overrides(**override)
        assert err.value.path == path

    def test_invalid_toml(self):
        with pytest.raises(ConfigError):
            C.loads("name = = 1")

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            C.preset("nope")

    def test_env_seed_override(self):
        cfg = apply_env_overrides(C.preset("desk"), {C.SEED_ENV: "7"})
        assert cfg.seeds == [7]
        assert apply_env_overrides(C.preset("desk"), {}).seeds == [0, 1, 2]
        with pytest.raises(ConfigError):
            apply_env_overrides(C.preset("desk"), {C.SEED_ENV: "x"})


class TestReport:
    def test_single_record(self):
        rows = build_rows([result("FT", 0, 40.0)])
        text = render(rows, "csv", COLUMNS)
        assert text.count("\n") == 2 and text.startswith(",".join(COLUMNS))
        assert rows[0]["AG"] is None

    def test_gaps_against_matching_retrain(self):
        rows = build_rows([result("FT", 0, 40.0), result(RETRAIN, 0, 30.0, 50, 50, 46)])
        ft = next(r for r in rows if r["method"] == "FT")
        assert ft["gap_UA"] == 10.0 and ft["gap_MIA"] == 4.0 and ft["AG"] == 3.5

    def test_aggregate_mean_std(self):
        values = [10.0, 20.0, 30.0, 40.0, 50.0]
        results = [result("FT", s, v) for s, v in enumerate(values)]
        results += [result(RETRAIN, s, 30.0) for s in range(5)]
        agg = next(r for r in aggregate(results) if r["method"] == "FT")
        mean = sum(values) / 5
        std = (sum((v - mean) ** 2 for v in values) / 4) ** 0.5
        assert agg["n"] == 5 and agg["UA_mean"] == pytest.approx(mean) and agg["UA_std"] == pytest.approx(std)
        assert agg["gap_UA"] == pytest.approx(12.0) and agg["AG_of_means"] == pytest.approx(0.0)
        assert agg["UA_table"] == f"30.00 ± {std:.2f} (12.00)"

    def test_csv_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        results = [result(m, s, *rng.uniform(0, 100, 4)) for m in ("FT", RETRAIN) for s in range(3)]
        rows = build_rows(results)
        emit_report(rows, "csv", tmp_path / "r.csv")
        back = read_csv_report(tmp_path / "r.csv")
        assert len(back) == len(rows)
        for a, b in zip(rows, back):
            for col in ("UA", "RA", "TA", "MIA", "gap_UA", "AG"):
                assert abs(a[col] - b[col]) <= 1e-4

    def test_json_render(self, tmp_path):
        rows = build_rows([result("FT", 0, 40.0)])
        emit_report(rows, "json", tmp_path / "r.json")
        assert json.loads((tmp_path / "r.json").read_text())[0]["UA"] == 40.0

    def test_unwritable_path(self, tmp_path):
        with pytest.raises(OSError):
            emit_report(build_rows([result("FT", 0, 1.0)]), "csv", tmp_path / "missing" / "r.csv")

    def test_empty_and_bad_format(self, tmp_path):
        with pytest.raises(InputError):
            emit_report([], "csv", tmp_path / "r.csv")
        with pytest.raises(InputError):
            render(build_rows([result("FT", 0, 1.0)]), "xml")

    def test_grid_row_count(self):
        methods, policies, seeds, values = ["FT", "RL", "SalUn"], list(SCENARIOS), range(5), [0.1, 0.5]
        results = [result(m, s, 50.0, policy=p, value=v)
                   for m in methods + [RETRAIN] for p in policies for s in seeds for v in values]
        rows = build_rows(results)
        assert sum(r["method"] != RETRAIN for r in rows) == 3 * 7 * 5 * 2 == 210
        assert len(aggregate(results)) == 4 * 7 * 2
        assert len(build_rows([result("FT", 0, 1.0), result(RETRAIN, 0, 1.0)])) == 2

    def test_rte_excluded_when_asked(self, tmp_path):
        paths = write_reports([result("FT", 0, 1.0), result(RETRAIN, 0, 1.0)], tmp_path, include_rte=False)
        assert all(r["RTE"] is None for r in read_csv_report(paths["report.csv"]))
        assert "0.1" in (tmp_path / "timings.csv").read_text()


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    cfg = tiny_config(tmp_path_factory.mktemp("grid"))
    return cfg, run_experiment(cfg)


class TestRunner:
    def test_grid_completes(self, tiny_run):
        cfg, manifest = tiny_run
        assert not manifest.failures
        assert len(manifest.runs) == 1 + 1 + 3
        assert {r["method"] for r in manifest.results()} == {"FT", "RL", "SalUn", RETRAIN}
        for name in ("report.csv", "report.json", "aggregate.csv", "aggregate.json", "timings.csv"):
            assert (cfg.output_dir / name).exists()

    def test_verify_clean(self, tiny_run):
        cfg, _ = tiny_run
        assert verify(cfg.output_dir / "manifest.json") == []

    def test_rerun_reuses_and_reports_are_identical(self, tiny_run):
        cfg, _ = tiny_run
        before = (cfg.output_dir / "report.csv").read_bytes()
        again = run_experiment(cfg)
        assert all(r.reused for r in again.runs)
        assert (cfg.output_dir / "report.csv").read_bytes() == before

    def test_stage_key_scope(self):
        cfg = C.preset("desk")
        base = stage_key(cfg, "baseline", "NoAug", 0)
        assert stage_key(cfg.with_overrides(unlearn__lr=0.5), "baseline", "NoAug", 0) == base
        assert stage_key(cfg.with_overrides(baseline__lr=0.5), "baseline", "NoAug", 0) != base
        ft = stage_key(cfg, "unlearn", "NoAug", 0, 0.5, "FT")
        assert stage_key(cfg.with_overrides(salun__fraction=0.2), "unlearn", "NoAug", 0, 0.5, "FT") == ft

    def test_failure_is_isolated(self, tmp_path, monkeypatch):
        def boom(*args, **kwargs):
            raise RuntimeError("injected")
        monkeypatch.setattr(runner, "random_label", boom)
        manifest = run_experiment(tiny_config(tmp_path))
        failed = [r for r in manifest.runs if r.status != "ok"]
        assert [r.method for r in failed] == ["RL"] and "injected" in failed[0].error
        assert {r["method"] for r in manifest.results()} == {"FT", "SalUn", RETRAIN}

    def test_verify_detects_tampering(self, tmp_path):
        cfg = tiny_config(tmp_path, methods=["FT"])
        manifest = run_experiment(cfg)
        path = cfg.output_dir / "manifest.json"
        manifest.config["seeds"] = [5]
        manifest.save(path)
        problems = verify(path)
        assert any("config hash" in p for p in problems)

    def test_manifest_load_rejects_garbage(self, tmp_path):
        (tmp_path / "m.json").write_text("{}")
        with pytest.raises(Exception) as err:
            RunManifest.load(tmp_path / "m.json")
        assert type(err.value).__name__ == "FormatError"


class TestCli:
    def test_preset_print_and_write(self, tmp_path, capsys):
        assert main(["preset", "desk"]) == 0
        assert 'name = "desk"' in capsys.readouterr().out
        assert main(["preset", "desk", "--write", str(tmp_path / "d.toml")]) == 0
        assert C.load(tmp_path / "d.toml").hash() == C.preset("desk").hash()

    def test_run_report_verify(self, tmp_path, capsys):
        cfg = tiny_config(tmp_path, methods=["FT"])
        C.save(cfg, tmp_path / "c.toml")
        assert main(["run", str(tmp_path / "c.toml"), "--output-dir", str(tmp_path / "out")]) == 0
        manifest = tmp_path / "out" / "manifest.json"
        assert main(["report", str(manifest), "--format", "json", "--out", str(tmp_path / "rep")]) == 0
        assert (tmp_path / "rep" / "report.json").exists()
        assert main(["verify", str(manifest)]) == 0

    def test_config_error_exit_1(self, tmp_path):
        (tmp_path / "bad.toml").write_text('schema = 1\nname = "x"\n')
        assert main(["run", str(tmp_path / "bad.toml")]) == 1

    def test_run_failure_exit_2(self, tmp_path, monkeypatch):
        monkeypatch.setattr(runner, "fine_tune", lambda *a, **k: (_ for _ in ()).throw(RuntimeError("x")))
        cfg = tiny_config(tmp_path, methods=["FT"])
        C.save(cfg, tmp_path / "c.toml")
        assert main(["run", str(tmp_path / "c.toml")]) == 2

    def test_missing_file_exit_3(self, tmp_path):
        assert main(["run", str(tmp_path / "absent.toml")]) == 3
        assert main(["report", str(tmp_path / "absent.json")]) == 3

    def test_env_seed(self, tmp_path, monkeypatch):
        cfg = tiny_config(tmp_path, methods=["FT"])
        C.save(cfg, tmp_path / "c.toml")
        monkeypatch.setenv(C.SEED_ENV, "3")
        assert main(["run", str(tmp_path / "c.toml")]) == 0
        manifest = RunManifest.load(cfg.output_dir / "manifest.json")
        assert {r.seed for r in manifest.runs} == {3}
        assert os.environ[C.SEED_ENV] == "3"
