import json
import math
import os
import subprocess
import sys

import numpy as np
import pytest

from fedni.cli import main as cli_main
from fedni.datagen import CohortSpec, generate_population, save_dataset
from fedni.harness import (ConfigError, ExperimentConfig, derive_seed, dumps_report, fold_masks,
                           load_config, parse_kv, parse_matrix, report_rows, run_ablation,
                           run_experiment, sweep, two_sample_ttest)

from .oracles import brute_pooled_ttest

TINY = dict(M=2, E1=1, T1=2, E2=2, T2=2, central_epochs=4, folds=2, repeats=1,
            gen_enc_dims=(8, 4), gen_feat_dims=(8, 8), clf_hidden=(8, 4))


@pytest.fixture(scope="module")
def tiny_pop():
    return generate_population(CohortSpec(n=40, d=5, seed=1))


# ------------------------------------------------------------------ t-test

def test_ttest_identical_samples():
    t, p = two_sample_ttest([1, 2, 3], [1, 2, 3])
    assert t == 0.0 and p > 0.9


def test_ttest_matches_textbook():
    a, b = [2.1, 3.4, 1.9, 5.0, 4.2], [1.0, 0.5, 2.2, 1.7]
    t, p = two_sample_ttest(a, b)
    assert abs(t - brute_pooled_ttest(a, b)) < 1e-9
    assert 0 < p < 0.05


def test_ttest_too_few():
    assert all(math.isnan(v) for v in two_sample_ttest([1.0], [2.0, 3.0]))


# ------------------------------------------------------------------ config

def test_parse_kv_types():
    cfg = parse_kv("mode = fedgcn\nk = 5  # comment\nsigma = none\nwire = yes\nlr = 0.01\n"
                   "clf_hidden = 16, 8\n")
    assert (cfg.mode, cfg.k, cfg.sigma, cfg.wire, cfg.lr, cfg.clf_hidden) == ("fedgcn", 5, None, True, 0.01, (16, 8))


def test_parse_kv_errors():
    with pytest.raises(ConfigError):
        parse_kv("bogus = 1")
    with pytest.raises(ConfigError):
        parse_kv("k 5")
    with pytest.raises(ConfigError):
        parse_kv("wire = maybe")


def test_defaults_follow_published_settings():
    cfg = ExperimentConfig()
    assert (cfg.alpha, cfg.beta, cfg.k, cfg.M, cfg.lr, cfg.sigma_dp, cfg.folds) == (1.0, 1.0, 10, 5, 1e-3, 0.01, 5)


def test_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig(mode="nope").validate()
    with pytest.raises(ConfigError):
        ExperimentConfig(mode="fedgcn", masking="random").validate()
    with pytest.raises(ConfigError):
        ExperimentConfig(folds=1).validate()


def test_seed_env_override(tmp_path, monkeypatch):
    p = tmp_path / "c.cfg"
    p.write_text("seed = 3\n")
    monkeypatch.setenv("FEDNI_SEED", "11")
    assert load_config(p).seed == 11
    monkeypatch.delenv("FEDNI_SEED")
    assert load_config(p).seed == 3


def test_parse_matrix_base_and_blocks():
    m = parse_matrix("mode = fedni\nrepeats = 2\n[bfs]\nmasking = bfs\n[rand]\nmasking = random\n")
    assert [n for n, _ in m] == ["bfs", "rand"]
    assert m[1][1].masking == "random" and m[1][1].repeats == 2


def test_sweep_names():
    assert [n for n, _ in sweep(ExperimentConfig(), "k", [3, 5])] == ["k=3", "k=5"]


def test_derive_seed_distinct_and_stable():
    seeds = {derive_seed(0, r, s) for r in range(5) for s in range(7)}
    assert len(seeds) == 35
    assert derive_seed(4, 1, 2) == derive_seed(4, 1, 2)


def test_fold_masks_partition_labeled():
    labeled = np.random.default_rng(0).random(50) < 0.8
    folds = fold_masks(labeled, 5, 1)
    total = np.sum(folds, axis=0)
    np.testing.assert_array_equal(total, labeled.astype(int))


# ---------------------------------------------------------------- experiments

def test_centralgcn_equals_fedgcn_single_client(tiny_pop):
    base = ExperimentConfig(**{**TINY, "M": 1, "sigma_dp": 0.0, "T2": 2, "E2": 2, "central_epochs": 4})
    a = run_experiment(base.replace(mode="centralgcn"), tiny_pop)
    b = run_experiment(base.replace(mode="fedgcn"), tiny_pop)
    assert [c["metrics"] for c in a["cells"]] == [c["metrics"] for c in b["cells"]]


@pytest.mark.parametrize("mode", ["fedni", "random_inpaint", "localgcn"])
def test_experiment_is_deterministic(tiny_pop, mode):
    cfg = ExperimentConfig(mode=mode, **TINY)
    assert dumps_report(run_experiment(cfg, tiny_pop)) == dumps_report(run_experiment(cfg, tiny_pop))


def test_report_contents(tiny_pop):
    rep = run_experiment(ExperimentConfig(mode="fedni", **TINY), tiny_pop, quality_episodes=2)
    assert rep["config"]["mode"] == "fedni"
    assert len(rep["cells"]) == 2
    assert set(rep["aggregate"]) == {"accuracy", "auc", "precision", "recall", "f1"}
    assert {"rec_mse", "frechet"} <= set(rep["inpaint_quality"])
    assert len(rep["round_logs"]["phase1"][0]) == TINY["T1"]
    rows = report_rows(rep)
    assert json.loads(rows[0]["config"])["mode"] == "fedni"


def test_ablation_identical_configs(tiny_pop):
    cfg = ExperimentConfig(mode="localgcn", **TINY)
    res = run_ablation([("a", cfg), ("b", cfg)], tiny_pop)
    assert res["table"]["a"] == res["table"]["b"]
    assert all(t["p"] > 0.9 for t in res["tests"])


def test_ablation_needs_two(tiny_pop):
    with pytest.raises(ConfigError):
        run_ablation([("a", ExperimentConfig())], tiny_pop)


# ----------------------------------------------------------------------- cli

def write_tiny_config(path, mode="fedni"):
    lines = [f"mode = {mode}"] + [f"{k} = {', '.join(map(str, v)) if isinstance(v, tuple) else v}"
                                  for k, v in TINY.items()]
    path.write_text("\n".join(lines) + "\n")


def test_cli_gen_run_ablate(tmp_path):
    spec = tmp_path / "spec.cfg"
    spec.write_text("n = 40\nd = 5\nseed = 2\n")
    data = tmp_path / "d.fni"
    assert cli_main(["gen", "--spec", str(spec), "--out", str(data)]) == 0
    cfg = tmp_path / "run.cfg"
    write_tiny_config(cfg)
    assert cli_main(["run", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "report.json").exists() and (tmp_path / "o" / "cells.csv").exists()
    matrix = tmp_path / "m.cfg"
    matrix.write_text(cfg.read_text() + "[fl_g]\ninpaint_fl = fl_g\n[nofl]\ninpaint_fl = nofl_d_g\n")
    assert cli_main(["ablate", "--matrix", str(matrix), "--data", str(data), "--out", str(tmp_path / "a")]) == 0
    assert (tmp_path / "a" / "ttests.csv").read_text().startswith("a,b,metric")


def test_cli_bad_config(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("bogus = 1\n")
    assert cli_main(["run", "--config", str(cfg), "--data", "x", "--out", str(tmp_path)]) == 2
    assert "unknown config key" in capsys.readouterr().err


def test_cli_run_twice_byte_identical(tmp_path):
    data = tmp_path / "d.fni"
    save_dataset(generate_population(CohortSpec(n=40, d=5, seed=3)), data)
    cfg = tmp_path / "run.cfg"
    write_tiny_config(cfg)
    env = {**os.environ, "FEDNI_SEED": "7"}
    outs = []
    for i in range(2):
        out = tmp_path / f"o{i}"
        subprocess.run([sys.executable, "-m", "fedni.cli", "run", "--config", str(cfg), "--data", str(data),
                        "--out", str(out)], check=True, env=env, capture_output=True)
        outs.append((out / "report.json").read_bytes())
    assert outs[0] == outs[1]
    assert json.loads(outs[0])["config"]["seed"] == 7


def test_remerge_each_round_runs_and_differs(tiny_pop):
    base = ExperimentConfig(mode="fedni", **{**TINY, "T2": 3})
    a = run_experiment(base, tiny_pop)
    b = run_experiment(base.replace(remerge_each_round=True), tiny_pop)
    assert dumps_report(b) == dumps_report(run_experiment(base.replace(remerge_each_round=True), tiny_pop))
    # first-round losses agree since the initial merge is shared
    first = lambda r: [fold[0]["server_loss"] for fold in r["round_logs"]["phase2"]]
    assert first(a) == first(b)
    assert a["round_logs"]["phase2"] != b["round_logs"]["phase2"]
    with pytest.raises(ConfigError):
        ExperimentConfig(mode="fedgcn", remerge_each_round=True).validate()
