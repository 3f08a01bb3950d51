#!/usr/bin/env python3
"""
Experiment grids, the on-disk result store and the report/plot builders.

Store layout (runs/<grid name>/):
    progress.json          completed / failed cells, stats (saved after every change)
    results.jsonl          one summary record per completed cell
    cells/<cell>/          history.jsonl, embedding.json, attacks.jsonl,
                           watermark.wm, model.ckpt, partition.json, verification.json
    reports/*.csv          tables written by report_tables
    plots/<cell>.png       progression plots
"""

from __future__ import annotations

import itertools
import json
import math
import multiprocessing
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from datetime import datetime
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402
from rich.table import Table  # noqa: E402
from tqdm import tqdm  # noqa: E402

import settings  # noqa: E402
from attacks import run_attack, select_coalition  # noqa: E402
from datasets import DatasetSplits, load_dataset, partition_iid, partition_noniid, save_partition_manifest  # noqa: E402
from errors import ConfigError, LabError  # noqa: E402
from federation import EmbeddingMode, FederationConfig, computational_overhead, read_history, run_federation  # noqa: E402
from settings import CODE_VERSION, SCHEMA_VERSION, console, derive_seed, digest_of  # noqa: E402
from training import accuracy, configure_determinism, save_checkpoint  # noqa: E402
from verification import verify  # noqa: E402
from watermark import WatermarkMethod, generate_watermark, save_watermark  # noqa: E402

# Reference values reported at full MNIST scale, shown next to our numbers for context.
REFERENCE_WATERMARK_ACCURACY = {
    ("pre_embed", 1, 250): 24.00, ("waffle", 1, 250): 99.00,
    ("pre_embed", 5, 200): 30.00, ("waffle", 5, 200): 99.00,
    ("pre_embed", 10, 150): 22.75, ("waffle", 10, 150): 98.50,
    ("pre_embed", 20, 100): 31.00, ("waffle", 20, 100): 98.75,
}
REFERENCE_OVERHEAD = {
    WatermarkMethod.WAFFLE_PATTERN.value: 3.06,
    WatermarkMethod.EMBEDDED_CONTENT.value: 2.02,
    WatermarkMethod.UNRELATE.value: 10.39,
    WatermarkMethod.UNSTRUCT.value: 0.91,
}
REFERENCE_DATASETS = ("mnist",)


# ---------------------------- Grid ----------------------------

@dataclass
class AttackSpec:
    kind: str
    coalitions: List[int | float] = field(default_factory=lambda: [1])
    params: Dict = field(default_factory=dict)


@dataclass
class GridCell:
    name: str
    mode: str
    method: str
    local_passes: int
    aggregation_rounds: int
    seed: int
    federation: FederationConfig

    def to_dict(self) -> Dict:
        return {
            "name": self.name,
            "mode": self.mode,
            "method": self.method,
            "local_passes": self.local_passes,
            "aggregation_rounds": self.aggregation_rounds,
            "seed": self.seed,
            "federation": self.federation.to_dict(),
        }


@dataclass
class ExperimentGrid:
    name: str
    dataset: str = "mnist-mini"
    dataset_options: Dict = field(default_factory=dict)
    arch: str = "cnn5"
    num_clients: int = 20
    clients_per_round: int = 5
    schedules: List[Tuple[int, int]] = field(default_factory=list)
    partition: str = "iid"
    per_client: Optional[int] = None
    classes_per_client: int = 2
    methods: List[str] = field(default_factory=lambda: [WatermarkMethod.WAFFLE_PATTERN.value])
    watermark_size: int = 100
    ood_dataset: str = "fashion-mnist"
    ood_options: Dict = field(default_factory=dict)
    modes: List[str] = field(default_factory=lambda: [EmbeddingMode.NONE.value, EmbeddingMode.WAFFLE.value])
    client: Dict = field(default_factory=dict)
    waffle: Dict = field(default_factory=dict)
    # per-method {"client": {...}, "waffle": {...}} merged over the shared settings
    method_overrides: Dict[str, Dict] = field(default_factory=dict)
    attacks: List[AttackSpec] = field(default_factory=list)
    seeds: List[int] = field(default_factory=lambda: [0])
    parallel_clients: int = 1
    resumable: bool = True

    def __post_init__(self):
        self.schedules = [tuple(int(v) for v in s) for s in self.schedules]
        for s in self.schedules:
            if len(s) != 2 or s[0] < 1 or s[1] < 0:
                raise ConfigError(f"Schedule entries are [E_c, E_a] with E_c >= 1, E_a >= 0; got {list(s)}")
        if self.partition not in ("iid", "noniid"):
            raise ConfigError(f"partition must be 'iid' or 'noniid', got '{self.partition}'")
        for method in self.methods:
            try:
                WatermarkMethod(method)
            except ValueError as e:
                raise ConfigError(f"Unknown watermark method '{method}'") from e
        for mode in self.modes:
            try:
                EmbeddingMode(mode)
            except ValueError as e:
                raise ConfigError(f"Unknown embedding mode '{mode}'") from e
        for method, override in self.method_overrides.items():
            if method not in self.methods:
                raise ConfigError(f"method_overrides names '{method}', which is not in methods {self.methods}")
            unknown = set(override) - {"client", "waffle"}
            if unknown:
                raise ConfigError(f"method_overrides['{method}'] accepts only client and waffle, got {sorted(unknown)}")
        self.attacks = [a if isinstance(a, AttackSpec) else AttackSpec(**a) for a in self.attacks]

    @classmethod
    def from_dict(cls, data: Dict) -> "ExperimentGrid":
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(f"Invalid grid: {e}") from e

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentGrid":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Grid file not found: {path}")
        try:
            with open(path, "r") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Grid file {path} is not valid JSON: {e}") from e
        data.setdefault("name", path.stem)
        return cls.from_dict(data)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["schedules"] = [list(s) for s in self.schedules]
        return data

    def cells(self) -> List[GridCell]:
        """Cartesian product of schedules x modes x methods x seeds; the baseline runs once per schedule and seed."""
        cells = []
        for (e_c, e_a), mode, method, seed in itertools.product(self.schedules, self.modes, self.methods, self.seeds):
            if mode == EmbeddingMode.NONE.value and method != self.methods[0]:
                continue
            override = self.method_overrides.get(method, {}) if mode != EmbeddingMode.NONE.value else {}
            client = {**self.client, **override.get("client", {}), "local_passes": e_c}
            federation = FederationConfig.from_dict({
                "num_clients": self.num_clients,
                "clients_per_round": self.clients_per_round,
                "aggregation_rounds": e_a,
                "client": client,
                "waffle": {**self.waffle, **override.get("waffle", {})},
                "embedding_mode": mode,
                "seed": seed,
                "arch": self.arch,
                "parallel_clients": self.parallel_clients,
                "resumable": self.resumable,
            })
            name = f"{mode}_{method}_ec{e_c}_ea{e_a}_s{seed}"
            cells.append(GridCell(name, mode, method, e_c, e_a, seed, federation))
        return cells

    def cell_digest(self, cell: GridCell) -> str:
        return digest_of({
            "federation": cell.federation.digest(),
            "dataset": self.dataset,
            "dataset_options": self.dataset_options,
            "partition": self.partition,
            "per_client": self.per_client,
            "classes_per_client": self.classes_per_client,
            "method": cell.method,
            "watermark_size": self.watermark_size,
            "ood_dataset": self.ood_dataset,
            "ood_options": self.ood_options,
            "attacks": [asdict(a) for a in self.attacks],
        })


# ---------------------------- Result store ----------------------------

class ResultStore:
    """Append-only results plus a resumable progress file."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.progress_file = self.root / "progress.json"
        self.results_file = self.root / "results.jsonl"
        self.completed: Dict[str, str] = {}
        self.failed: Dict[str, str] = {}
        self.stats = {"cells_run": 0, "cells_failed": 0, "wall_time": 0.0}
        self.load_progress()

    @classmethod
    def for_grid(cls, grid: ExperimentGrid, root: Optional[str | Path] = None) -> "ResultStore":
        base = Path(root) if root is not None else settings.runs_root()
        return cls(base / grid.name)

    def cell_dir(self, cell_name: str) -> Path:
        return self.root / "cells" / cell_name

    def load_progress(self) -> None:
        if self.progress_file.exists():
            with open(self.progress_file, "r") as f:
                data = json.load(f)
            self.completed = dict(data.get("completed", {}))
            self.failed = dict(data.get("failed", {}))
            self.stats.update(data.get("stats", {}))

    def save_progress(self) -> None:
        data = {
            "last_update": datetime.now().isoformat(),
            "completed": self.completed,
            "failed": self.failed,
            "total_completed": len(self.completed),
            "stats": self.stats,
        }
        tmp = self.progress_file.with_suffix(".tmp")
        with open(tmp, "w") as f:
            json.dump(data, f, indent=2)
        os.replace(tmp, self.progress_file)

    def reset(self) -> None:
        for path in (self.progress_file, self.results_file):
            if path.exists():
                path.unlink()
        self.completed, self.failed = {}, {}
        self.stats = {"cells_run": 0, "cells_failed": 0, "wall_time": 0.0}
        console.print(f"[yellow]Progress reset for {self.root}[/yellow]")

    def is_done(self, cell_name: str, digest: str) -> bool:
        return self.completed.get(cell_name) == digest

    def mark_done(self, summary: Dict) -> None:
        with open(self.results_file, "a") as f:
            f.write(json.dumps(summary) + "\n")
            f.flush()
        self.completed[summary["cell"]] = summary["config_digest"]
        self.failed.pop(summary["cell"], None)
        self.stats["cells_run"] += 1
        self.stats["wall_time"] += summary.get("wall_time", 0.0)
        self.save_progress()

    def mark_failed(self, cell_name: str, error: str) -> None:
        self.failed[cell_name] = error
        self.stats["cells_failed"] += 1
        self.save_progress()

    def results(self) -> List[Dict]:
        """Latest summary per cell."""
        if not self.results_file.exists():
            return []
        latest: Dict[str, Dict] = {}
        with open(self.results_file, "r") as f:
            for line in f:
                line = line.strip()
                if line:
                    record = json.loads(line)
                    latest[record["cell"]] = record
        return [latest[name] for name in sorted(latest)]

    def history(self, cell_name: str) -> List[Dict]:
        return [r.to_dict() for r in read_history(self.cell_dir(cell_name) / "history.jsonl")]

    def attack_reports(self, cell_name: str) -> List[Dict]:
        path = self.cell_dir(cell_name) / "attacks.jsonl"
        if not path.exists():
            return []
        with open(path, "r") as f:
            return [json.loads(line) for line in f if line.strip()]


def append_attack_report(path: Path, report: Dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as f:
        f.write(json.dumps(report) + "\n")
        f.flush()


# ---------------------------- Running cells ----------------------------

@lru_cache(maxsize=8)
def _cached_dataset(name: str, options_json: str) -> DatasetSplits:
    return load_dataset(name, **json.loads(options_json))


def load_grid_dataset(name: str, options: Dict) -> DatasetSplits:
    return _cached_dataset(name, json.dumps(options, sort_keys=True))


def partition_for(grid: ExperimentGrid, splits: DatasetSplits, seed: int):
    train = splits.train
    if grid.partition == "noniid":
        return partition_noniid(train, grid.num_clients, grid.classes_per_client, derive_seed(seed, "partition"))
    per_client = grid.per_client or len(train) // grid.num_clients
    return partition_iid(train, grid.num_clients, per_client, derive_seed(seed, "partition"))


def run_cell(grid: ExperimentGrid, cell: GridCell, store_root: str | Path, resume: bool = True, show_progress: bool = False) -> Dict:
    """Train one cell, verify it and run its attack ladder. Returns the summary record."""
    started = time.perf_counter()
    configure_determinism()
    store_root = Path(store_root)
    cell_dir = store_root / "cells" / cell.name
    cell_dir.mkdir(parents=True, exist_ok=True)
    digest = grid.cell_digest(cell)

    splits = load_grid_dataset(grid.dataset, grid.dataset_options)
    shards = partition_for(grid, splits, cell.seed)
    save_partition_manifest(shards, cell_dir / "partition.json", {"dataset": grid.dataset, "partition": grid.partition})

    needs_ood = cell.method == WatermarkMethod.UNRELATE.value or any(a.kind == "evasion" for a in grid.attacks)
    ood = load_grid_dataset(grid.ood_dataset, grid.ood_options) if needs_ood else None
    wm = generate_watermark(
        cell.method,
        splits.train.image_shape,
        splits.train.num_classes,
        grid.watermark_size,
        derive_seed(cell.seed, "watermark", cell.method),
        train_pool=splits.train,
        external_pool=ood.train if ood is not None else None,
    )
    commitment = save_watermark(wm, cell_dir / "watermark.wm")

    result = run_federation(
        cell.federation, splits.train, splits.test, shards, wm,
        run_dir=cell_dir, resume=resume, show_progress=show_progress,
    )
    save_checkpoint(result.model, cell_dir / "model.ckpt")
    verification = verify(result.model, wm)
    with open(cell_dir / "verification.json", "w") as f:
        json.dump(verification.to_dict(), f, indent=2)

    warnings = [e.warning for e in result.embedding if e.warning]
    attack_path = cell_dir / "attacks.jsonl"
    if attack_path.exists():
        attack_path.unlink()
    if cell.mode != EmbeddingMode.NONE.value:
        for spec in grid.attacks:
            for size in spec.coalitions:
                coalition = select_coalition(shards, size, derive_seed(cell.seed, "coalition"))
                report = run_attack(
                    spec.kind, result.model, wm, splits.train, splits.test, coalition,
                    cell.federation.client, cell.seed, spec.params,
                    ood_pool=ood.test if ood is not None else None, show_progress=show_progress,
                )
                record = dict(report.to_dict(), cell=cell.name, config_digest=digest,
                              code_version=CODE_VERSION, schema_version=SCHEMA_VERSION)
                append_attack_report(attack_path, record)
                warnings.extend(report.warnings)

    history = result.history
    overhead = computational_overhead(history) if history and cell.mode == EmbeddingMode.WAFFLE.value else None
    return {
        "cell": cell.name,
        "config_digest": digest,
        "code_version": CODE_VERSION,
        "schema_version": SCHEMA_VERSION,
        "dataset": grid.dataset,
        "partition": grid.partition,
        "mode": cell.mode,
        "method": cell.method,
        "local_passes": cell.local_passes,
        "aggregation_rounds": cell.aggregation_rounds,
        "seed": cell.seed,
        "final_test_accuracy": accuracy(result.model, splits.test.tensors()),
        "final_watermark_accuracy": verification.watermark_accuracy,
        "threshold": verification.threshold,
        "verdict": verification.verdict,
        "overhead": overhead,
        "retrain_rounds_total": sum(r.retrain_rounds_used for r in history),
        "commitment": commitment,
        "warnings": warnings,
        "wall_time": time.perf_counter() - started,
    }


def _run_cell_job(grid_data: Dict, cell_name: str, store_root: str, resume: bool) -> Dict:
    grid = ExperimentGrid.from_dict(grid_data)
    cell = next(c for c in grid.cells() if c.name == cell_name)
    return run_cell(grid, cell, store_root, resume=resume)


def run_grid(
    grid: ExperimentGrid,
    store: Optional[ResultStore] = None,
    workers: int = 1,
    resume: bool = True,
    show_progress: bool = True,
) -> ResultStore:
    """Execute every pending cell. Failed cells are recorded and the grid keeps going."""
    store = store or ResultStore.for_grid(grid)
    cells = grid.cells()
    if not cells:
        console.print("[yellow]Grid has no cells - nothing to run[/yellow]")
        return store

    pending = [c for c in cells if not (resume and store.is_done(c.name, grid.cell_digest(c)))]
    if len(pending) < len(cells):
        console.print(f"[blue]Resuming: {len(cells) - len(pending)} of {len(cells)} cells already completed[/blue]")
    success, errors = 0, 0

    with tqdm(total=len(pending), desc=f"Grid {grid.name}", unit="cell", disable=not show_progress) as pbar:
        if workers > 1:
            context = multiprocessing.get_context("spawn")
            with ProcessPoolExecutor(max_workers=workers, mp_context=context) as pool:
                futures = {
                    pool.submit(_run_cell_job, grid.to_dict(), c.name, str(store.root), resume): c for c in pending
                }
                for future in as_completed(futures):
                    cell = futures[future]
                    try:
                        store.mark_done(future.result())
                        success += 1
                    except Exception as e:
                        store.mark_failed(cell.name, f"{type(e).__name__}: {e}")
                        console.print(f"[red]Cell {cell.name} failed: {e}[/red]")
                        errors += 1
                    pbar.update(1)
                    pbar.set_postfix({"ok": success, "failed": errors})
        else:
            for cell in pending:
                console.print(f"[cyan]Running {cell.name}[/cyan]")
                try:
                    store.mark_done(run_cell(grid, cell, store.root, resume=resume, show_progress=show_progress))
                    success += 1
                except LabError as e:
                    store.mark_failed(cell.name, f"{type(e).__name__}: {e}")
                    console.print(f"[red]Cell {cell.name} failed: {e}[/red]")
                    errors += 1
                except Exception as e:
                    store.mark_failed(cell.name, f"{type(e).__name__}: {e}")
                    console.print(f"[red]Unexpected failure in {cell.name}: {e}[/red]")
                    errors += 1
                pbar.update(1)
                pbar.set_postfix({"ok": success, "failed": errors})

    console.print(f"\n[green]Grid {grid.name}: {success} completed, {errors} failed[/green]")
    return store


# ---------------------------- Reports ----------------------------

def _fmt(value) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "—"
    if isinstance(value, float):
        return f"{value:.2f}"
    return str(value)


def _render(title: str, frame: pd.DataFrame) -> None:
    table = Table(title=title)
    for column in frame.columns:
        table.add_column(str(column))
    for row in frame.itertuples(index=False):
        table.add_row(*[_fmt(v) for v in row])
    console.print(table)


def _attack_frame(store: ResultStore, results: pd.DataFrame) -> pd.DataFrame:
    rows = []
    for cell in results.itertuples(index=False):
        for report in store.attack_reports(cell.cell):
            rows.append({
                "mode": cell.mode,
                "method": cell.method,
                "attack": report["attack"],
                "coalition_size": report["coalition_size"],
                "post_watermark_accuracy": report["post_watermark_accuracy"] * 100,
                "utility_drop_pp": report["utility_drop"],
                "verified": float(report["verdict"]),
                "survives": float(report["watermark_survives"]),
            })
    return pd.DataFrame(rows)


def utility_deltas(results: pd.DataFrame) -> pd.DataFrame:
    """Test accuracy of each watermarked cell minus its matched baseline, in percentage points."""
    keys = ["dataset", "partition", "local_passes", "aggregation_rounds", "seed"]
    baseline = results[results["mode"] == EmbeddingMode.NONE.value][keys + ["final_test_accuracy"]]
    baseline = baseline.rename(columns={"final_test_accuracy": "baseline_test_accuracy"})
    marked = results[results["mode"] != EmbeddingMode.NONE.value]
    merged = marked.merge(baseline, on=keys, how="left")
    merged["utility_delta_pp"] = (merged["final_test_accuracy"] - merged["baseline_test_accuracy"]) * 100
    return merged


def report_tables(store: ResultStore, out_dir: Optional[str | Path] = None, show: bool = True) -> Dict[str, pd.DataFrame]:
    """Watermark accuracy, utility delta, overhead and attack resilience tables (CSV + console)."""
    records = store.results()
    if not records:
        raise ConfigError(f"No results in {store.root}")
    results = pd.DataFrame(records)
    out_dir = Path(out_dir) if out_dir else store.root / "reports"
    out_dir.mkdir(parents=True, exist_ok=True)
    group = ["dataset", "mode", "method", "local_passes", "aggregation_rounds"]

    watermark = (
        results.assign(watermark_accuracy=results["final_watermark_accuracy"] * 100,
                       test_accuracy=results["final_test_accuracy"] * 100)
        .groupby(group, as_index=False)
        .agg(watermark_accuracy=("watermark_accuracy", "mean"), test_accuracy=("test_accuracy", "mean"), runs=("cell", "count"))
    )
    watermark["reference"] = [
        REFERENCE_WATERMARK_ACCURACY.get((r.mode, r.local_passes, r.aggregation_rounds)) if r.dataset in REFERENCE_DATASETS else None
        for r in watermark.itertuples(index=False)
    ]

    deltas = utility_deltas(results)
    utility = (
        deltas.groupby(group, as_index=False, dropna=False)
        .agg(utility_delta_pp=("utility_delta_pp", "mean"), runs=("cell", "count"))
        if len(deltas) else pd.DataFrame(columns=group + ["utility_delta_pp", "runs"])
    )

    waffle = results[(results["mode"] == EmbeddingMode.WAFFLE.value) & results["overhead"].notna()]
    if len(waffle):
        overhead = (
            waffle.assign(overhead_pct=waffle["overhead"].astype(float) * 100)
            .groupby(["dataset", "method"], as_index=False)
            .agg(overhead_pct=("overhead_pct", "mean"), runs=("cell", "count"))
        )
        overhead["reference"] = [
            REFERENCE_OVERHEAD.get(r.method) if r.dataset in REFERENCE_DATASETS else None
            for r in overhead.itertuples(index=False)
        ]
    else:
        overhead = pd.DataFrame(columns=["dataset", "method", "overhead_pct", "runs", "reference"])

    attack_rows = _attack_frame(store, results)
    if len(attack_rows):
        attacks = (
            attack_rows.groupby(["mode", "method", "attack", "coalition_size"], as_index=False)
            .agg(post_watermark_accuracy=("post_watermark_accuracy", "mean"),
                 utility_drop_pp=("utility_drop_pp", "mean"),
                 verified=("verified", "mean"),
                 survives=("survives", "mean"))
        )
    else:
        attacks = pd.DataFrame(columns=["mode", "method", "attack", "coalition_size", "post_watermark_accuracy",
                                        "utility_drop_pp", "verified", "survives"])

    tables = {"watermark_accuracy": watermark, "utility_delta": utility, "overhead": overhead, "attacks": attacks}
    for name, frame in tables.items():
        frame.to_csv(out_dir / f"{name}.csv", index=False)
    if show:
        _render("Final watermark accuracy (%)", watermark)
        _render("Test accuracy delta vs baseline (pp)", utility)
        _render("Computational overhead (%)", overhead)
        _render("Attack resilience", attacks)
        console.print(f"[green]Reports written to {out_dir}[/green]")
    return tables


# ---------------------------- Plots ----------------------------

def _baseline_cell(results: pd.DataFrame, row) -> Optional[str]:
    match = results[
        (results["mode"] == EmbeddingMode.NONE.value)
        & (results["dataset"] == row.dataset)
        & (results["partition"] == row.partition)
        & (results["local_passes"] == row.local_passes)
        & (results["aggregation_rounds"] == row.aggregation_rounds)
        & (results["seed"] == row.seed)
    ]
    return match["cell"].iloc[0] if len(match) else None


def plot_progression(store: ResultStore, metric: str = "both", out_dir: Optional[str | Path] = None) -> Dict[str, Dict]:
    """One figure per cell: test and watermark accuracy per round, baseline test accuracy overlaid.

    Returns {cell: {"path": ..., "series": {label: [(round, value), ...]}}} with the raw values plotted.
    """
    if metric not in ("test", "watermark", "both"):
        raise ConfigError(f"metric must be 'test', 'watermark' or 'both', got '{metric}'")
    records = store.results()
    out_dir = Path(out_dir) if out_dir else store.root / "plots"
    out_dir.mkdir(parents=True, exist_ok=True)
    if not records:
        return {}
    results = pd.DataFrame(records)
    plotted: Dict[str, Dict] = {}

    for row in results.itertuples(index=False):
        history = store.history(row.cell)
        if not history:
            continue
        series: Dict[str, List] = {}
        if metric in ("test", "both"):
            series["test"] = [(r["round"], r["test_accuracy"]) for r in history]
        if metric in ("watermark", "both"):
            points = [(r["round"], r["watermark_accuracy"]) for r in history if r["watermark_accuracy"] is not None]
            if points:
                series["watermark"] = points
        baseline = _baseline_cell(results, row) if row.mode != EmbeddingMode.NONE.value else None
        if baseline and metric in ("test", "both"):
            base_history = store.history(baseline)
            if base_history:
                series["baseline test"] = [(r["round"], r["test_accuracy"]) for r in base_history]

        fig, ax = plt.subplots(figsize=(7, 4))
        for label, points in series.items():
            rounds, values = zip(*points)
            ax.plot(rounds, values, label=label, linestyle="--" if label.startswith("baseline") else "-")
        if "watermark" in series:
            ax.axhline(row.threshold, color="grey", linewidth=0.8, linestyle=":", label="T_acc")
        ax.set_xlabel("Aggregation round")
        ax.set_ylabel("Accuracy")
        ax.set_ylim(0.0, 1.02)
        ax.set_title(row.cell)
        ax.legend(loc="lower right")
        path = out_dir / f"{row.cell}.png"
        fig.savefig(path, dpi=100, bbox_inches="tight")
        plt.close(fig)
        plotted[row.cell] = {"path": str(path), "series": series}

    console.print(f"[green]{len(plotted)} plot(s) written to {out_dir}[/green]")
    return plotted
