#!/usr/bin/env python3
"""
Recompute grid summaries from the raw per-round and per-attack JSONL files and
compare them with results.jsonl. Reads files only; imports nothing from the lab.

    python recompute_summary.py runs/desk-mnist-mini [--tolerance 1e-9]
"""

import argparse
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd
from rich.console import Console
from rich.table import Table

console = Console()


def read_jsonl(path: Path) -> List[Dict]:
    if not path.exists():
        return []
    with open(path, "r") as f:
        return [json.loads(line) for line in f if line.strip()]


def latest_results(root: Path) -> pd.DataFrame:
    rows: Dict[str, Dict] = {}
    for record in read_jsonl(root / "results.jsonl"):
        rows[record["cell"]] = record
    return pd.DataFrame(list(rows.values()))


def recompute_cell(root: Path, row) -> Dict:
    cell_dir = root / "cells" / row.cell
    history = pd.DataFrame(read_jsonl(cell_dir / "history.jsonl"))
    out = {"cell": row.cell, "final_test_accuracy": None, "final_watermark_accuracy": None, "overhead": None}
    if len(history):
        last = history.sort_values("round").iloc[-1]
        out["final_test_accuracy"] = float(last["test_accuracy"])
        out["final_watermark_accuracy"] = last["watermark_accuracy"]
        if row.mode == "waffle":
            passes = (history["selected_clients"].map(len) * history["local_passes"]).sum()
            out["overhead"] = float(history["retrain_rounds_used"].sum() / passes) if passes else 0.0
    if row.mode == "post_embed":
        embedding = cell_dir / "embedding.json"
        if embedding.exists():
            with open(embedding, "r") as f:
                post = [e for e in json.load(f) if e["phase"] == "post_embed"]
            out["final_watermark_accuracy"] = post[-1]["watermark_accuracy"] if post else None
        # the post-embedded model's test accuracy is not in the history
        out["final_test_accuracy"] = None
    return out


def close(a: Optional[float], b: Optional[float], tolerance: float) -> bool:
    if a is None or b is None or pd.isna(a) or pd.isna(b):
        return True
    return abs(float(a) - float(b)) <= tolerance


def main():
    parser = argparse.ArgumentParser(description="Recompute grid summaries from raw JSONL")
    parser.add_argument("runs_dir")
    parser.add_argument("--tolerance", type=float, default=1e-9)
    args = parser.parse_args()

    root = Path(args.runs_dir)
    results = latest_results(root)
    if results.empty:
        console.print(f"[red]No results.jsonl records in {root}[/red]")
        sys.exit(2)

    recomputed = pd.DataFrame([recompute_cell(root, row) for row in results.itertuples(index=False)])
    merged = results.merge(recomputed, on="cell", suffixes=("", "_raw"))

    keys = ["dataset", "partition", "local_passes", "aggregation_rounds", "seed"]
    baseline = merged[merged["mode"] == "none"][keys + ["final_test_accuracy_raw"]].rename(
        columns={"final_test_accuracy_raw": "baseline_raw"}
    )
    merged = merged.merge(baseline, on=keys, how="left")
    merged["utility_delta_pp_raw"] = (merged["final_test_accuracy_raw"] - merged["baseline_raw"]) * 100

    table = Table(title=f"Recomputed summary: {root}")
    for column in ("cell", "test (stored / raw)", "wm (stored / raw)", "overhead (stored / raw)", "delta pp (raw)", "ok"):
        table.add_column(column)
    mismatches = 0
    for row in merged.itertuples(index=False):
        checks = [
            close(row.final_test_accuracy, row.final_test_accuracy_raw, args.tolerance),
            close(row.final_watermark_accuracy, row.final_watermark_accuracy_raw, args.tolerance),
            close(row.overhead, row.overhead_raw, args.tolerance),
        ]
        ok = all(checks)
        mismatches += 0 if ok else 1

        def pair(a, b):
            fa = "—" if a is None or pd.isna(a) else f"{float(a):.4f}"
            fb = "—" if b is None or pd.isna(b) else f"{float(b):.4f}"
            return f"{fa} / {fb}"

        delta = row.utility_delta_pp_raw
        table.add_row(
            row.cell,
            pair(row.final_test_accuracy, row.final_test_accuracy_raw),
            pair(row.final_watermark_accuracy, row.final_watermark_accuracy_raw),
            pair(row.overhead, row.overhead_raw),
            "—" if row.mode == "none" or pd.isna(delta) else f"{delta:+.2f}",
            "[green]yes[/green]" if ok else "[red]NO[/red]",
        )
    console.print(table)

    attack_rows = []
    for row in results.itertuples(index=False):
        for report in read_jsonl(root / "cells" / row.cell / "attacks.jsonl"):
            drop = (report["pre_test_accuracy"] - report["post_test_accuracy"]) * 100
            if abs(drop - report["utility_drop"]) > 1e-6:
                console.print(f"[red]{row.cell}: utility_drop {report['utility_drop']} != recomputed {drop}[/red]")
                mismatches += 1
            attack_rows.append(report)
    console.print(f"{len(attack_rows)} attack report(s) checked")

    if mismatches:
        console.print(f"[red]{mismatches} mismatch(es) between stored and recomputed values[/red]")
        sys.exit(1)
    console.print("[green]All stored summaries match the raw records[/green]")


if __name__ == "__main__":
    main()
