import json
import shutil

import pandas as pd
import pytest
import yaml

from cedl import main
from conftest import write_config
from errors import ConfigError
from experiment import cmd_eval, cmd_plot, cmd_run, cmd_sweep_beta, load_scores, sweep_beta
from trainer import task_dir

TABLES = ("accuracy.csv", "detection_reports.csv", "detection_table.csv")


@pytest.fixture
def run_copy(toy_run_dir, tmp_path):
    """Private copy of the shared toy run for tests that rewrite files."""
    return shutil.copytree(toy_run_dir, tmp_path / "run")


# -----------------------------
# run
# -----------------------------
def test_run_writes_task_directories(toy_run_dir):
    for t in (1, 2, 3):
        out = task_dir(toy_run_dir, t)
        for name in ("checkpoint.pt", "buffer_manifest.json", "epoch_log.csv", "metrics.json", "scores.csv", "uncertainty.csv"):
            assert (out / name).exists(), f"missing {out / name}"
    assert (toy_run_dir / "toy_stream.csv").exists()


def test_manifest_contents(toy_run_dir):
    manifest = json.loads((toy_run_dir / "manifest.json").read_text())
    assert {"name", "seed", "code_version", "config_hash", "config", "resolved_config", "aca", "aia"} <= set(manifest)
    assert manifest["seed"] == 7 and manifest["n_tasks"] == 3
    assert len(manifest["config_hash"]) == 64
    assert manifest["step_size"] == 2 and len(manifest["training_hash"]) == 64
    assert set(pd.read_csv(toy_run_dir / "detection_table.csv")["step_size"]) == {2}

    accuracy = pd.read_csv(toy_run_dir / "accuracy.csv")
    assert list(accuracy["task_id"]) == [1, 2, 3]
    assert manifest["aca"] == pytest.approx(accuracy["accuracy"].iloc[-1], abs=1e-6)
    assert manifest["aia"] == pytest.approx(accuracy["accuracy"].mean(), abs=1e-6)


def test_score_dump_columns(toy_run_dir):
    frame = pd.read_csv(task_dir(toy_run_dir, 2) / "scores.csv")
    expected = {"sample_id", "data_task", "true_label", "split", "vacuity", "dissonance", "msp", "odin", "cedl_combined"}
    assert expected <= set(frame.columns)
    assert set(frame["split"]) == {"IND_f", "IND_c", "OOD"}


def test_detection_table_covers_every_method(toy_run_dir):
    table = pd.read_csv(toy_run_dir / "detection_table.csv")
    assert set(table["method_id"]) == {
        "msp", "odin", "energy", "entropy", "msp_bc",
        "cedl_vacuity", "cedl_dissonance", "cedl_dissonance_inv", "cedl_combined",
    }
    tasks = table.groupby("comparison_id")["TASKS"].first().to_dict()
    assert tasks == {"IND_vs_OOD": 2, "INDc_vs_OOD": 2, "INDf_vs_OOD": 1, "INDc_vs_INDf": 2}


def test_run_is_reproducible(toy_run_dir, tmp_path):
    config = write_config(tmp_path / "toy.yaml", tmp_path / "again")
    second = cmd_run(config)
    for name in TABLES:
        assert (second / name).read_bytes() == (toy_run_dir / name).read_bytes(), name


def test_rerun_with_new_training_settings_is_refused(tmp_path):
    out = tmp_path / "results"
    cmd_run(write_config(tmp_path / "short.yaml", out, trainer={"epochs": 2}))
    checkpoint = task_dir(out / "toy", 3) / "checkpoint.pt"
    trained = checkpoint.read_bytes()

    longer = write_config(
        tmp_path / "longer.yaml", out,
        trainer={"epochs": 5}, evaluation={"score_methods": ["msp", "cedl_vacuity"]},
    )
    with pytest.raises(ConfigError, match="different config"):
        cmd_run(longer)
    assert main(["run", str(longer)]) == 2
    assert checkpoint.read_bytes() == trained


def test_rerun_with_new_evaluation_settings_rescores(tmp_path):
    out = tmp_path / "results"
    cmd_run(write_config(tmp_path / "short.yaml", out, trainer={"epochs": 2}))
    checkpoint = task_dir(out / "toy", 3) / "checkpoint.pt"
    trained = checkpoint.read_bytes()

    narrow = write_config(
        tmp_path / "narrow.yaml", out,
        trainer={"epochs": 2}, evaluation={"score_methods": ["msp", "cedl_vacuity"]},
    )
    run_dir = cmd_run(narrow)
    assert checkpoint.read_bytes() == trained
    assert set(pd.read_csv(run_dir / "detection_table.csv")["method_id"]) == {"msp", "cedl_vacuity"}
    metrics = json.loads((task_dir(run_dir, 2) / "metrics.json").read_text())
    assert {r["method_id"] for r in metrics["detection"]} == {"msp", "cedl_vacuity"}


def test_eval_regenerates_tables(toy_run_dir, run_copy):
    for name in TABLES:
        (run_copy / name).unlink()
    cmd_eval(run_copy)
    for name in TABLES:
        assert (run_copy / name).read_bytes() == (toy_run_dir / name).read_bytes(), name


def test_eval_needs_checkpoints(run_copy):
    (task_dir(run_copy, 2) / "checkpoint.pt").unlink()
    with pytest.raises(ConfigError, match="checkpoint"):
        cmd_eval(run_copy)


# -----------------------------
# sweep-beta
# -----------------------------
def test_sweep_over_default_grid(run_copy):
    table, summary = cmd_sweep_beta(run_copy)
    assert len(summary) == 11
    # only task 2 of 3 has both IND_f and OOD samples
    assert (summary["TASKS"] == 1).all()
    assert set(table["task_id"]) == {2}
    assert (run_copy / "sweep_beta.csv").exists() and (run_copy / "sweep_beta_summary.csv").exists()


def test_sweep_vacuity_endpoint_matches_stored_report(run_copy):
    table, _ = cmd_sweep_beta(run_copy, [0.0, 1.0])
    reports = pd.read_csv(run_copy / "detection_reports.csv")
    stored = reports.query("task_id == 2 and comparison_id == 'INDf_vs_OOD' and method_id == 'cedl_vacuity'")
    vac_fpr = table.loc[table["beta"] == 1.0, "fpr95"].item()
    assert vac_fpr == pytest.approx(stored["fpr95"].item(), abs=1e-6)
    assert vac_fpr < table.loc[table["beta"] == 0.0, "fpr95"].item()


def test_sweep_rejects_out_of_range_beta(run_copy):
    with pytest.raises(ConfigError, match="grid"):
        cmd_sweep_beta(run_copy, [0.5, 1.2])


def test_sweep_needs_both_sides():
    frame = pd.DataFrame({"split": ["IND_c", "OOD"], "vacuity": [0.1, 0.9], "dissonance": [0.2, 0.1]})
    with pytest.raises(ConfigError):
        sweep_beta({1: frame}, [0.5])


def test_missing_uncertainty_columns(tmp_path):
    out = task_dir(tmp_path, 1)
    out.mkdir(parents=True)
    pd.DataFrame({"split": ["IND_c"], "msp": [0.9]}).to_csv(out / "scores.csv", index=False)
    with pytest.raises(ConfigError, match="vacuity"):
        load_scores(tmp_path, required=("vacuity", "dissonance"))
    with pytest.raises(ConfigError):
        load_scores(tmp_path / "nothing")


# -----------------------------
# plot
# -----------------------------
def test_plot_fig3_one_figure_per_task(run_copy):
    written = cmd_plot(run_copy, "fig3")
    assert len([p for p in written if p.suffix == ".png"]) == 3
    assert len([p for p in written if p.suffix == ".pdf"]) == 3
    assert all(p.parent == run_copy / "figures" for p in written)


def test_plot_is_byte_identical_on_rerun(run_copy):
    for figure_id in ("fig4", "fig5"):
        first = {p: p.read_bytes() for p in cmd_plot(run_copy, figure_id)}
        second = {p: p.read_bytes() for p in cmd_plot(run_copy, figure_id)}
        assert first == second
    assert (run_copy / "figures" / "fig4_average_uncertainty.pdf").exists()
    assert (run_copy / "figures" / "fig5_beta_sweep.png").exists()


def test_plot_rejects_unknown_figure_and_empty_dir(run_copy, tmp_path):
    with pytest.raises(ConfigError, match="figure"):
        cmd_plot(run_copy, "fig9")
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(ConfigError, match="empty"):
        cmd_plot(empty, "fig3")


# -----------------------------
# CLI
# -----------------------------
def test_cli_success_paths(run_copy, capsys):
    assert main(["sweep-beta", str(run_copy), "--grid", "0.0", "0.5", "1.0"]) == 0
    assert "MEDIAN" in capsys.readouterr().out
    assert main(["plot", str(run_copy), "--figure", "fig4"]) == 0
    assert main(["eval", str(run_copy)]) == 0


def test_cli_usage_errors(run_copy, tmp_path, monkeypatch):
    assert main([]) == 2
    assert main(["plot", str(run_copy), "--figure", "fig9"]) == 2

    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["plot", str(empty), "--figure", "fig3"]) == 2
    assert main(["eval", str(empty)]) == 2

    bad = write_config(tmp_path / "bad.yaml", tmp_path / "out", trainer={"epochs": 0})
    assert main(["run", str(bad)]) == 2

    monkeypatch.setenv("DATA_DIR", str(tmp_path / "no_cifar_here"))
    cifar = tmp_path / "cifar.yaml"
    cifar.write_text(yaml.safe_dump({"name": "c", "output_dir": str(tmp_path / "out"), "dataset": {"id": "cifar100"}}))
    assert main(["run", str(cifar)]) == 2
    assert not (tmp_path / "out" / "c").exists()


def test_benchmark_headline_numbers(toy_run_dir):
    from run_benchmark import headline_numbers

    numbers = headline_numbers(toy_run_dir)
    manifest = json.loads((toy_run_dir / "manifest.json").read_text())
    assert numbers["ACA"] == pytest.approx(manifest["aca"] * 100)
    assert 0.0 <= numbers["vacuity AUROC (IND vs OOD)"] <= 100.0


def test_benchmark_table_spreads_step_sizes(tmp_path):
    from run_benchmark import aggregate_runs, write_benchmark_table

    runs = [
        cmd_run(write_config(
            tmp_path / f"step{k}.yaml", tmp_path / "results", name=f"step{k}",
            dataset={"classes_per_task": k, "samples_per_class": 20}, trainer={"epochs": 2},
        ))
        for k in (2, 3)
    ]
    for run_dir, k in zip(runs, (2, 3)):
        assert json.loads((run_dir / "manifest.json").read_text())["step_size"] == k

    table = aggregate_runs(runs)
    assert {"step_2", "step_3"} <= set(table.columns)
    assert set(table["metric"]) == {"AUROC", "AUPR", "FPR95"}
    assert set(table["trainer"]) == {"cedl"}
    row = table.query("method_id == 'cedl_vacuity' and comparison_id == 'IND_vs_OOD' and metric == 'AUROC'")
    assert len(row) == 1
    stored = pd.read_csv(runs[1] / "detection_table.csv").set_index(["method_id", "comparison_id"])
    assert row["step_3"].item() == pytest.approx(stored.loc[("cedl_vacuity", "IND_vs_OOD"), "AUROC"], abs=1e-6)

    path = write_benchmark_table(runs, tmp_path / "benchmark_table.csv")
    assert list(pd.read_csv(path).columns[:4]) == ["trainer", "method_id", "comparison_id", "metric"]

    with pytest.raises(ConfigError):
        aggregate_runs([])
