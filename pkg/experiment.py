# experiment.py
# Runs a configured experiment end to end and owns the results-directory layout:
#
#   results/<run>/
#     run.json                     training/evaluation hashes, written before the first task
#     manifest.json                config, config hash, seed, code version, step size, ACA/AIA
#     accuracy.csv                 task_id, accuracy
#     detection_reports.csv        one row per task x method x comparison
#     detection_table.csv          averaged over the tasks where each comparison exists
#     sweep_beta.csv / sweep_beta_summary.csv
#     figures/
#     task_<t>/{checkpoint.pt, buffer_manifest.json, epoch_log.csv, metrics.json,
#               scores.csv, uncertainty.csv}

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd

from backbone import EvidentialClassifier, load_checkpoint
from config import (
    ExperimentConfig,
    __version__,
    config_from_dict,
    config_hash,
    config_to_dict,
    evaluation_hash,
    load_config_dict,
    resolve_data_dir,
    training_hash,
    validate_config,
)
from data_tasks import TaskSpec, TaskStream, make_toy_stream, save_toy_stream_csv, split_tasks
from errors import ConfigError
from evidential import combined_uncertainty
from metrics import (
    AccuracyLog,
    detection_reports,
    fpr_at_tpr,
    auroc,
    score_stream,
    seen_class_accuracy,
    summarize_reports,
    uncertainty_by_task,
)
from trainer import run_stream, task_dir
from visualize import AVAILABLE_FIGURES, render_figure, save_figure

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.6f"
MANIFEST = "manifest.json"
RUN_RECORD = "run.json"
SCORES = "scores.csv"
UNCERTAINTY = "uncertainty.csv"


def build_stream(cfg: ExperimentConfig) -> TaskStream:
    if cfg.dataset_id == "toy":
        return make_toy_stream(cfg.n_tasks, cfg.classes_per_task, cfg.samples_per_class, cfg.seed)
    return split_tasks(cfg.dataset_id, cfg.n_tasks, cfg.seed, data_dir=resolve_data_dir(cfg))


# -----------------------------
# 1) Per-task evaluation
# -----------------------------
def evaluate_task(cfg: ExperimentConfig, run_dir: Path, task: TaskSpec, model: EvidentialClassifier, stream: TaskStream) -> dict:
    """
    Score every test sample with the model after task t, dump the scores and
    return the task's accuracy and detection reports.
    """
    t = task.task_id
    out = task_dir(run_dir, t)
    out.mkdir(parents=True, exist_ok=True)

    frame = score_stream(
        model,
        stream,
        t,
        cfg.score_methods,
        cfg.method_params,
        clamp=cfg.trainer.logit_clamp,
        uncertainty_source=cfg.uncertainty_source,
    )
    # full precision so sweeps recompute the stored metrics exactly
    frame.to_csv(out / SCORES, index=False)
    uncertainty_by_task(frame).to_csv(out / UNCERTAINTY, index=False, float_format=FLOAT_FORMAT)

    reports = []
    for method_id in cfg.score_methods:
        reports.extend(r.to_dict() for r in detection_reports(frame, t, method_id, cfg.aupr_positive))

    accuracy = seen_class_accuracy(model, stream, t, apply_bc=cfg.trainer.apply_bc)
    logger.info("task %d: accuracy %.4f, %d detection reports", t, accuracy, len(reports))
    return {"accuracy": accuracy, "detection": reports}


def _hook(cfg: ExperimentConfig, run_dir: Path):
    def hook(task: TaskSpec, model: EvidentialClassifier, stream: TaskStream) -> dict:
        return evaluate_task(cfg, run_dir, task, model, stream)
    return hook


# -----------------------------
# 2) Run-level tables
# -----------------------------
def write_tables(run_dir: Path, cfg: ExperimentConfig, raw_config: dict, reports: Sequence[dict]) -> dict:
    """Write accuracy/detection tables and the manifest; return the manifest."""
    accuracy_log = AccuracyLog()
    for report in reports:
        accuracy_log.append(report["accuracy"])

    accuracy = pd.DataFrame({
        "task_id": [r["task_id"] for r in reports],
        "accuracy": accuracy_log.accuracies,
    })
    accuracy.to_csv(run_dir / "accuracy.csv", index=False, float_format=FLOAT_FORMAT)

    detection = pd.DataFrame([row for r in reports for row in r["detection"]])
    if not detection.empty:
        detection.to_csv(run_dir / "detection_reports.csv", index=False, float_format=FLOAT_FORMAT)
        table = summarize_reports(detection)
        table.insert(0, "step_size", cfg.step_size)
        table.to_csv(run_dir / "detection_table.csv", index=False, float_format=FLOAT_FORMAT)

    manifest = {
        "name": cfg.name,
        "seed": cfg.seed,
        "code_version": __version__,
        "config_hash": config_hash(cfg),
        "training_hash": training_hash(cfg),
        "evaluation_hash": evaluation_hash(cfg),
        "config": raw_config,
        "resolved_config": config_to_dict(cfg),
        "step_size": cfg.step_size,
        "n_tasks": len(reports),
        "aca": accuracy_log.aca,
        "aia": accuracy_log.aia,
        "table_averaging": "each comparison is averaged over the tasks where both sides are non-empty",
    }
    (run_dir / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


# -----------------------------
# 3) Subcommands
# -----------------------------
def check_resumable(run_dir: Path, cfg: ExperimentConfig) -> None:
    """
    Refuse to write into a results directory whose checkpoints were trained
    under different settings. Evaluation-only changes are fine: the stored
    checkpoints are simply re-scored.
    """
    run_dir = Path(run_dir)
    stored: Optional[str] = None
    if (run_dir / RUN_RECORD).exists():
        stored = json.loads((run_dir / RUN_RECORD).read_text()).get("training_hash")
    elif (run_dir / MANIFEST).exists():
        stored = json.loads((run_dir / MANIFEST).read_text()).get("training_hash")

    has_checkpoints = any(run_dir.glob("task_*/checkpoint.pt"))
    if stored is None and not has_checkpoints:
        return
    current = training_hash(cfg)
    if stored != current:
        found = stored[:12] if stored else "unknown"
        raise ConfigError(
            "name",
            f"{run_dir} holds checkpoints trained with a different config "
            f"(training hash {found}, this config {current[:12]}); pick another name or remove the directory",
        )


def cmd_run(config_path: Path, check_data: bool = True) -> Path:
    """Train and evaluate the configured stream. Returns the results directory."""
    raw = load_config_dict(Path(config_path))
    cfg = config_from_dict(raw)
    validate_config(cfg, check_data=check_data)

    run_dir = cfg.run_dir
    check_resumable(run_dir, cfg)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / RUN_RECORD).write_text(json.dumps({
        "config_hash": config_hash(cfg),
        "training_hash": training_hash(cfg),
        "evaluation_hash": evaluation_hash(cfg),
        "code_version": __version__,
    }, indent=2, sort_keys=True))
    logger.info("run %s -> %s (config %s)", cfg.name, run_dir, config_hash(cfg)[:12])

    stream = build_stream(cfg)
    if cfg.dataset_id == "toy":
        save_toy_stream_csv(stream, run_dir / "toy_stream.csv")

    result = run_stream(
        stream,
        cfg.trainer,
        cfg.backbone_id,
        results_dir=run_dir,
        hooks=[_hook(cfg, run_dir)],
        eval_key=evaluation_hash(cfg),
    )
    write_tables(run_dir, cfg, raw, result.reports)
    return run_dir


def _load_manifest(results_dir: Path) -> dict:
    path = Path(results_dir) / MANIFEST
    if not path.exists():
        raise ConfigError("results_dir", f"no {MANIFEST} in {results_dir}; is this a results directory?")
    return json.loads(path.read_text())


def cmd_eval(results_dir: Path) -> Path:
    """Re-score every stored checkpoint with the stored config and rewrite all tables."""
    results_dir = Path(results_dir)
    raw = _load_manifest(results_dir)["config"]
    cfg = config_from_dict(raw)
    validate_config(cfg)
    stream = build_stream(cfg)

    reports = []
    for task in stream.tasks:
        out = task_dir(results_dir, task.task_id)
        checkpoint = out / "checkpoint.pt"
        if not checkpoint.exists():
            raise ConfigError("results_dir", f"missing checkpoint {checkpoint}")
        model = load_checkpoint(checkpoint)
        report = {
            "task_id": task.task_id,
            "eval_key": evaluation_hash(cfg),
            **evaluate_task(cfg, results_dir, task, model, stream),
        }
        (out / "metrics.json").write_text(json.dumps(report, indent=2))
        reports.append(report)

    write_tables(results_dir, cfg, raw, reports)
    return results_dir


def load_scores(results_dir: Path, required: Sequence[str] = ()) -> Dict[int, pd.DataFrame]:
    """task_id -> stored per-sample score frame."""
    results_dir = Path(results_dir)
    scores = {}
    for path in sorted(results_dir.glob(f"task_*/{SCORES}")):
        task_id = int(path.parent.name.split("_")[1])
        frame = pd.read_csv(path, float_precision="round_trip")
        missing = [c for c in required if c not in frame.columns]
        if missing:
            raise ConfigError("scores", f"{path} is missing columns {missing}")
        scores[task_id] = frame
    if not scores:
        raise ConfigError("results_dir", f"no score dumps under {results_dir}")
    return scores


def sweep_beta(scores: Dict[int, pd.DataFrame], beta_grid: Sequence[float]) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    IND_f vs OOD detection with -CU(beta) for every beta and every task that has
    both sides. Returns (per-task rows, per-beta box-plot statistics).
    """
    rows = []
    for task_id, frame in sorted(scores.items()):
        pos = frame["split"] == "IND_f"
        neg = frame["split"] == "OOD"
        if not pos.any() or not neg.any():
            continue
        vac = frame["vacuity"].to_numpy()
        diss = frame["dissonance"].to_numpy()
        for beta in beta_grid:
            score = -combined_uncertainty(vac, diss, beta)
            rows.append({
                "task_id": task_id,
                "beta": float(beta),
                "fpr95": fpr_at_tpr(score[pos.to_numpy()], score[neg.to_numpy()]),
                "auroc": auroc(score[pos.to_numpy()], score[neg.to_numpy()]),
            })

    table = pd.DataFrame(rows, columns=["task_id", "beta", "fpr95", "auroc"])
    if table.empty:
        raise ConfigError("scores", "no task has both IND_f and OOD samples to sweep over")

    summary = table.groupby("beta", as_index=False)["fpr95"].agg(
        TASKS="count",
        MEAN="mean",
        MEDIAN="median",
        Q1=lambda s: s.quantile(0.25),
        Q3=lambda s: s.quantile(0.75),
        MIN="min",
        MAX="max",
    )
    return table, summary


def cmd_sweep_beta(results_dir: Path, beta_grid: Optional[Sequence[float]] = None) -> Tuple[pd.DataFrame, pd.DataFrame]:
    results_dir = Path(results_dir)
    if beta_grid is None:
        beta_grid = config_from_dict(_load_manifest(results_dir)["config"]).beta_grid
    if any(not 0.0 <= b <= 1.0 for b in beta_grid):
        raise ConfigError("grid", "beta values must be in [0, 1]")

    table, summary = sweep_beta(load_scores(results_dir, required=("vacuity", "dissonance", "split")), beta_grid)
    table.to_csv(results_dir / "sweep_beta.csv", index=False, float_format=FLOAT_FORMAT)
    summary.to_csv(results_dir / "sweep_beta_summary.csv", index=False, float_format=FLOAT_FORMAT)
    return table, summary


def _load_uncertainty(results_dir: Path) -> pd.DataFrame:
    frames = []
    for path in sorted(Path(results_dir).glob(f"task_*/{UNCERTAINTY}")):
        frame = pd.read_csv(path)
        frame.insert(0, "model_task", int(path.parent.name.split("_")[1]))
        frames.append(frame)
    if not frames:
        raise ConfigError("results_dir", f"no {UNCERTAINTY} dumps under {results_dir}")
    return pd.concat(frames, ignore_index=True)


def cmd_plot(results_dir: Path, figure_id: str) -> List[Path]:
    """Render one figure family from stored dumps into results_dir/figures (PNG + PDF)."""
    if figure_id not in AVAILABLE_FIGURES:
        raise ConfigError("figure", f"unknown figure '{figure_id}' (options: {AVAILABLE_FIGURES})")
    results_dir = Path(results_dir)
    if not results_dir.is_dir() or not any(results_dir.iterdir()):
        raise ConfigError("results_dir", f"{results_dir} is empty or missing")

    if figure_id == "fig3":
        data = {"scores": load_scores(results_dir, required=("vacuity", "dissonance", "split"))}
    elif figure_id == "fig4":
        data = {"uncertainty": _load_uncertainty(results_dir)}
    else:
        sweep_path = results_dir / "sweep_beta.csv"
        sweep = pd.read_csv(sweep_path) if sweep_path.exists() else cmd_sweep_beta(results_dir)[0]
        data = {"sweep": sweep}

    written: List[Path] = []
    for stem, fig in render_figure(figure_id, data):
        written.extend(save_figure(fig, results_dir / "figures", stem))
    logger.info("%s: wrote %d files", figure_id, len(written))
    return written
