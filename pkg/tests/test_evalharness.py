import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bodvw import evalharness
from bodvw.errors import ConfigError, TrainingError
from bodvw.evalharness import (
    CLUSTER_GRID,
    EvalReport,
    ExperimentConfig,
    PipelineError,
    ablate_clusters,
    ablate_layers,
    confusion_matrix,
    export_report,
    load_report,
    metrics,
    run_experiment,
    stratified_split,
)
from bodvw.imageio import DatasetManifest
from oracles import hand_metrics, stratified_counts

FAST = dict(k=6, runs=2, kmeans_restarts=1, kmeans_max_iterations=50, c_grid=(1, 10), folds=3)


def manifest_with(counts):
    entries, cats = [], tuple(f"c{i}" for i in range(len(counts)))
    for c, n in enumerate(counts):
        entries += [(f"c{c}/{i}.png", c) for i in range(n)]
    return DatasetManifest("m", cats, tuple(entries))


class TestConfig:
    def test_defaults(self):
        cfg = ExperimentConfig()
        assert (cfg.variant, cfg.layer, cfg.k, cfg.runs, cfg.split_ratio) == ("bodvw", 4, 400, 5, 0.7)
        assert cfg.gamma == 1e-5 and cfg.folds == 5

    @pytest.mark.parametrize("kw", [dict(split_ratio=1.0), dict(split_ratio=0.0), dict(runs=0),
                                    dict(variant="vlad"), dict(layer=7), dict(k=1), dict(workers=0),
                                    dict(gamma=0.0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            ExperimentConfig(**kw)

    def test_dict_round_trip(self):
        cfg = ExperimentConfig(layer="p_3", c_grid=[1, 5], base_seed=9)
        assert ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict({"colour": "blue"})

    def test_seeds_per_run(self):
        cfg = ExperimentConfig(base_seed=10, k=50)
        assert cfg.kmeans_config(3).seed == 13 and cfg.kmeans_config(3).k == 50
        assert cfg.grid_spec(2).fold_seed == 12


class TestSplit:
    def test_counts(self):
        m = manifest_with([10, 69, 2, 3])
        train, test = stratified_split(m, 0.7, seed=0)
        assert train.category_counts() == [7, 48, 1, 2]
        assert test.category_counts() == [3, 21, 1, 1]
        assert not set(train.paths) & set(test.paths)
        assert sorted(train.paths + test.paths) == sorted(m.paths)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(2, 40), min_size=2, max_size=5), st.floats(0.05, 0.95), st.integers(0, 999))
    def test_round_half_up_and_determinism(self, counts, ratio, seed):
        m = manifest_with(counts)
        train, _ = stratified_split(m, ratio, seed)
        expect = [min(max(stratified_counts(n, ratio), 1), n - 1) for n in counts]
        assert train.category_counts() == expect
        assert stratified_split(m, ratio, seed)[0] == train

    def test_errors(self):
        with pytest.raises(TrainingError):
            stratified_split(manifest_with([5, 1]), 0.7, 0)
        with pytest.raises(ValueError):
            stratified_split(manifest_with([5, 5]), 1.0, 0)


class TestMetrics:
    def test_two_class_example(self):
        m = metrics([[8, 2], [1, 9]])
        assert m["precision"][0] == 8 / 9
        assert m["recall"][0] == 0.8
        assert m["f1"][0] == pytest.approx(0.8421052631578948, abs=1e-15)

    def test_perfect_and_empty(self):
        m = metrics(np.diag([3, 4, 5]))
        for key in m:
            assert m[key].tolist() == [1.0, 1.0, 1.0]
        z = metrics([[0, 0], [0, 5]])
        assert z["precision"][0] == z["recall"][0] == z["f1"][0] == 0.0

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 5).flatmap(lambda m: st.lists(st.lists(st.integers(0, 30), min_size=m, max_size=m),
                                                        min_size=m, max_size=m)))
    def test_against_hand_formulas(self, cm):
        got, ref = metrics(cm), hand_metrics(cm)
        for key in ref:
            np.testing.assert_allclose(got[key], ref[key], atol=1e-12, rtol=0)

    def test_f1_fixed_point(self):
        m = metrics([[6, 4], [4, 6]])
        assert m["precision"][0] == m["recall"][0] == m["f1"][0] == 0.6

    def test_confusion_matrix(self):
        cm = confusion_matrix([0, 0, 1, 2, 2], [0, 1, 1, 2, 0], 3)
        assert cm.tolist() == [[1, 1, 0], [0, 1, 0], [1, 0, 1]]


@pytest.fixture(scope="module")
def small_report(synthetic_small):
    manifest, source = synthetic_small
    return run_experiment(ExperimentConfig(**FAST), features=source, manifest=manifest)


class TestRunExperiment:
    def test_structure(self, small_report, synthetic_small):
        rep = small_report
        assert rep.complete and rep.error is None
        assert len(rep.runs) == 2 and len(rep.accuracies) == 2
        assert rep.mean_accuracy == math.fsum(rep.accuracies) / 2
        assert rep.classes == ["class_0", "class_1", "class_2"]
        for r in rep.runs:
            cm = np.array(r["confusion_matrix"])
            assert r["accuracy"] == 100.0 * np.trace(cm) / cm.sum()
            assert cm.sum() == r["n_test"] and r["n_train"] + r["n_test"] == len(synthetic_small[0])
            assert all(0 <= v <= 100 for vals in r["per_class"].values() for v in vals)
            assert r["codebook"]["k"] == 6 and r["train_only_fit"]
        assert set(rep.timings) == {"runs", "total"}
        assert rep.config == ExperimentConfig(**FAST).to_dict()
        assert rep.design["epsilon"] == 8e-8

    def test_per_class_means(self, small_report):
        rep = small_report
        for ci, name in enumerate(rep.classes):
            for key in ("precision", "recall", "f1"):
                vals = [r["per_class"][key][ci] for r in rep.runs]
                assert rep.per_class_mean[name][key] == math.fsum(vals) / len(vals)

    def test_single_run_mean(self, synthetic_small):
        manifest, source = synthetic_small
        rep = run_experiment(ExperimentConfig(**{**FAST, "runs": 1}), features=source, manifest=manifest)
        assert rep.mean_accuracy == rep.accuracies[0]

    def test_bitwise_reproducible(self, small_report, synthetic_small):
        manifest, source = synthetic_small
        again = run_experiment(ExperimentConfig(**FAST), features=source, manifest=manifest)
        assert again.fingerprint() == small_report.fingerprint()
        par = run_experiment(ExperimentConfig(**{**FAST, "workers": 2}), features=source, manifest=manifest)
        assert par.deterministic_dict() == small_report.deterministic_dict()
        assert par.config["workers"] == 2

    def test_no_leakage(self, synthetic_small, monkeypatch):
        manifest, source = synthetic_small
        seen = {"codebook": [], "svm": []}
        real_cb, real_gs = evalharness.train_codebook, evalharness.grid_search_C

        def spy_cb(features, *a, **kw):
            seen["codebook"].append({f.provenance for f in features})
            return real_cb(features, *a, **kw)

        def spy_gs(X, y, *a, **kw):
            seen["svm"].append(len(y))
            return real_gs(X, y, *a, **kw)

        monkeypatch.setattr(evalharness, "train_codebook", spy_cb)
        monkeypatch.setattr(evalharness, "grid_search_C", spy_gs)
        cfg = ExperimentConfig(**FAST)
        rep = run_experiment(cfg, features=source, manifest=manifest)
        assert len(seen["codebook"]) == len(seen["svm"]) == cfg.runs
        for r, (paths, n_svm) in enumerate(zip(seen["codebook"], seen["svm"])):
            train, _ = stratified_split(manifest, cfg.split_ratio, cfg.run_seed(r))
            assert paths == set(train.paths)
            assert n_svm == len(train) == rep.runs[r]["n_train"]

    def test_dcf_variant(self, synthetic_small):
        manifest, source = synthetic_small
        rep = run_experiment(ExperimentConfig(**{**FAST, "variant": "dcf_bovw", "runs": 1}), features=source,
                             manifest=manifest)
        assert rep.config["variant"] == "dcf_bovw" and len(rep.runs) == 1

    def test_failure_marks_report_incomplete(self, synthetic_small):
        manifest, source = synthetic_small
        broken = manifest.paths[-1]

        def flaky(path, layer):
            if path == broken:
                raise OSError("disk went away")
            return source(path, layer)

        with pytest.raises(PipelineError) as info:
            run_experiment(ExperimentConfig(**FAST), features=flaky, manifest=manifest)
        rep = info.value.report
        assert rep is not None and not rep.complete
        assert "disk went away" in rep.error and rep.runs == []

    def test_missing_sources(self):
        with pytest.raises(ConfigError):
            run_experiment(ExperimentConfig())
        with pytest.raises(ConfigError):
            run_experiment(ExperimentConfig(), manifest=manifest_with([3, 3]))


class TestAblations:
    def test_layers_five_rows(self, synthetic_small):
        manifest, source = synthetic_small
        table = ablate_layers(ExperimentConfig(**{**FAST, "runs": 1}), features=source, manifest=manifest)
        assert [r["value"] for r in table.rows] == ["p_1", "p_2", "p_3", "p_4", "p_5"]
        assert all(0 <= r["mean_accuracy"] <= 100 for r in table.rows)
        assert table.best in {"p_1", "p_2", "p_3", "p_4", "p_5"}

    def test_cluster_grid(self):
        assert CLUSTER_GRID == (100, 150, 200, 250, 300, 350, 400, 450, 500)
        assert 400 in CLUSTER_GRID

    def test_clusters_table(self, synthetic_small):
        manifest, source = synthetic_small
        table = ablate_clusters(ExperimentConfig(**{**FAST, "runs": 1, "layer": 5}), features=source,
                                manifest=manifest, ks=(4, 6, 8))
        assert [r["value"] for r in table.rows] == [4, 6, 8] and table.axis == "k"


class TestExport:
    def test_json_round_trip(self, small_report, tmp_path):
        export_report(small_report, tmp_path / "r.json", "json")
        back = load_report(tmp_path / "r.json")
        assert back.to_dict() == json.loads(json.dumps(small_report.to_dict()))
        assert back.fingerprint() == small_report.fingerprint()
        assert back.config == ExperimentConfig(**FAST).to_dict()

    def test_markdown_per_class_rows(self, small_report, tmp_path):
        rep4 = EvalReport.from_dict(json.loads(json.dumps(small_report.to_dict())))
        rep4.classes = ["Covid", "Normal", "PneumoniaB", "PneumoniaV"]
        rep4.per_class_mean = {c: {"precision": 90.0, "recall": 80.0, "f1": 84.7} for c in rep4.classes}
        for r in rep4.runs:
            r["confusion_matrix"] = np.eye(4, dtype=int).tolist()
        export_report(rep4, tmp_path / "r.md", "markdown")
        text = (tmp_path / "r.md").read_text()
        section = text.split("## Per-class metrics")[1].split("##")[0]
        rows = [ln for ln in section.splitlines() if ln.startswith("| ") and "Class" not in ln]
        assert len(rows) == 4
        assert '"variant": "bodvw"' in text

    def test_ablation_export(self, tmp_path):
        table = evalharness.AblationTable("k", [{"value": 100, "mean_accuracy": 50.0, "std_accuracy": 1.0,
                                                  "accuracies": [49.0, 51.0]}], {"k": 100})
        export_report(table, tmp_path / "a.md", "markdown")
        export_report(table, tmp_path / "a.json", "json")
        assert "| 100 | 50.00 | 1.00 | 2 |" in (tmp_path / "a.md").read_text()
        assert json.loads((tmp_path / "a.json").read_text())["rows"][0]["value"] == 100

    def test_bad_format_and_schema(self, small_report, tmp_path):
        with pytest.raises(ValueError):
            export_report(small_report, tmp_path / "r.txt", "yaml")
        d = small_report.to_dict()
        d["schema_version"] = 99
        (tmp_path / "old.json").write_text(json.dumps(d))
        with pytest.raises(ValueError):
            load_report(tmp_path / "old.json")

    def test_unwritable(self, small_report, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError):
            export_report(small_report, blocker / "r.json")
