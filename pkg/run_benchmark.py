#!/usr/bin/env python3
# run_benchmark.py
# Helper script to run the full CIFAR-100 experiments one after another and
# compare the headline numbers against reference targets.
#
# Takes many GPU-hours; never part of the test suite.

import json
import sys
from pathlib import Path
from typing import Iterable

import pandas as pd

from errors import ConfigError
from experiment import FLOAT_FORMAT, cmd_run

CONFIGS = [
    "configs/cifar100_step20.yaml",
    "configs/cifar100_step10.yaml",
    "configs/cifar100_step20_baseline.yaml",
    "configs/cifar100_step10_baseline.yaml",
]

# config -> {metric: target in percent}
REFERENCE_TARGETS = {
    "configs/cifar100_step20.yaml": {
        "ACA": 55.61,
        "AIA": 66.27,
        "vacuity AUROC (IND vs OOD)": 72.42,
        "vacuity FPR95 (IND vs OOD)": 76.09,
    },
}
TOLERANCE = 2.0  # percentage points; the exact class order is not recoverable

METRICS = ("AUROC", "AUPR", "FPR95")
BENCHMARK_TABLE = Path("results") / "benchmark_table.csv"


def headline_numbers(run_dir: Path) -> dict:
    manifest = json.loads((run_dir / "manifest.json").read_text())
    numbers = {"ACA": manifest["aca"] * 100, "AIA": manifest["aia"] * 100}

    table_path = run_dir / "detection_table.csv"
    if table_path.exists():
        table = pd.read_csv(table_path)
        row = table[(table["method_id"] == "cedl_vacuity") & (table["comparison_id"] == "IND_vs_OOD")]
        if not row.empty:
            numbers["vacuity AUROC (IND vs OOD)"] = row["AUROC"].iloc[0] * 100
            numbers["vacuity FPR95 (IND vs OOD)"] = row["FPR95"].iloc[0] * 100
    return numbers


def aggregate_runs(run_dirs: Iterable[Path]) -> pd.DataFrame:
    """
    Cross-run detection table: one row per trainer x method x comparison x
    metric, one column per step size (step_<k>). Runs sharing a step size and
    trainer are averaged.
    """
    frames = []
    for run_dir in map(Path, run_dirs):
        table_path = run_dir / "detection_table.csv"
        if not table_path.exists():
            raise ConfigError("results_dir", f"no detection_table.csv in {run_dir}")
        manifest = json.loads((run_dir / "manifest.json").read_text())
        table = pd.read_csv(table_path)
        if "step_size" not in table.columns:
            table.insert(0, "step_size", manifest["step_size"])
        table.insert(0, "trainer", manifest["resolved_config"]["trainer"]["method"])
        frames.append(table)
    if not frames:
        raise ConfigError("results_dir", "no runs to aggregate")

    long = pd.concat(frames, ignore_index=True).melt(
        id_vars=["trainer", "method_id", "comparison_id", "step_size"],
        value_vars=list(METRICS),
        var_name="metric",
    )
    wide = long.pivot_table(
        index=["trainer", "method_id", "comparison_id", "metric"],
        columns="step_size",
        values="value",
        aggfunc="mean",
    )
    wide.columns = [f"step_{int(k)}" for k in wide.columns]
    return wide.reset_index()


def write_benchmark_table(run_dirs: Iterable[Path], path: Path = BENCHMARK_TABLE) -> Path:
    table = aggregate_runs(run_dirs)
    path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def main():
    print("=" * 60)
    print("CIFAR-100 CONTINUAL RUNS")
    print("=" * 60)
    print(f"\nRunning {len(CONFIGS)} configs...\n")

    misses = []
    failed = []
    completed = []

    for i, config in enumerate(CONFIGS, 1):
        print(f"\n[{i}/{len(CONFIGS)}] {config}")
        print("-" * 60)

        try:
            run_dir = cmd_run(Path(config))
        except Exception as e:
            print(f"❌ Failed: {e}")
            failed.append(config)
            continue

        completed.append(run_dir)
        numbers = headline_numbers(run_dir)
        for metric, value in numbers.items():
            target = REFERENCE_TARGETS.get(config, {}).get(metric)
            if target is None:
                print(f"   {metric:<28} {value:6.2f}")
                continue
            ok = abs(value - target) <= TOLERANCE
            print(f"   {metric:<28} {value:6.2f}  (target {target:.2f}) {'✅' if ok else '⚠️'}")
            if not ok:
                misses.append(f"{config}: {metric}")

    if completed:
        print(f"\n📊 Step-size table: {write_benchmark_table(completed)}")

    # Summary
    print("\n" + "=" * 60)
    print("SUMMARY")
    print("=" * 60)
    print(f"✅ Completed: {len(CONFIGS) - len(failed)}/{len(CONFIGS)} runs")
    if failed:
        print(f"❌ Failed runs: {', '.join(failed)}")
    if misses:
        print(f"⚠️ Outside ±{TOLERANCE} points: {', '.join(misses)}")
    elif not failed:
        print("🎉 All reference targets reproduced!")

    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
