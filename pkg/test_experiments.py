#!/usr/bin/env python3
"""
Tests for experiment grids, the result store, reports and plots (smoke grid, synthetic data)
"""

import json
import tempfile
from pathlib import Path

from errors import ConfigError
from experiments import ExperimentGrid, ResultStore, plot_progression, report_tables, run_grid, utility_deltas

CONFIGS = Path(__file__).parent / "configs"


def smoke_grid(**overrides):
    with open(CONFIGS / "smoke_synthetic.json") as f:
        data = json.load(f)
    data.update(overrides)
    return ExperimentGrid.from_dict(data)


def test_grid_cell_counts():
    smoke = ExperimentGrid.from_file(CONFIGS / "smoke_synthetic.json")
    assert [c.name for c in smoke.cells()] == ["none_WafflePattern_ec1_ea2_s0", "waffle_WafflePattern_ec1_ea2_s0"]
    full = ExperimentGrid.from_file(CONFIGS / "full_mnist.json")
    cells = full.cells()
    assert len(cells) == 36
    assert sum(c.mode == "none" for c in cells) == 4
    assert all(c.federation.client.local_passes == c.local_passes for c in cells)
    desk = ExperimentGrid.from_file(CONFIGS / "desk_mnist_mini.json")
    assert len(desk.cells()) == 2 * 3 * 3


def test_method_overrides_reach_the_cells():
    full = ExperimentGrid.from_file(CONFIGS / "full_mnist.json")
    budgets = {
        c.method: c.federation.waffle.pretrain_epochs for c in full.cells() if c.mode == "waffle"
    }
    assert budgets == {"WafflePattern": 25, "EmbeddedContent": 90, "unRelate": 80, "unStruct": 150}
    rates = {c.method: c.federation.client.learning_rate for c in full.cells() if c.mode == "pre_embed"}
    assert rates["unStruct"] == 0.001 and rates["WafflePattern"] == 0.1
    baseline = [c for c in full.cells() if c.mode == "none"]
    assert all(c.federation.client.learning_rate == 0.1 for c in baseline)
    assert all(c.federation.waffle.pretrain_epochs == 25 for c in baseline)
    for bad in ({"Bogus": {"waffle": {}}}, {"WafflePattern": {"optimizer": {}}}):
        try:
            smoke_grid(method_overrides=bad)
        except ConfigError:
            continue
        raise AssertionError(f"expected ConfigError for {bad}")


def test_noniid_grid_covers_evasion():
    grid = ExperimentGrid.from_file(CONFIGS / "full_mnist_noniid.json")
    assert grid.partition == "noniid" and grid.classes_per_client == 2
    assert len(grid.cells()) == 4 * 2
    assert "evasion" in {a.kind for a in grid.attacks}


def test_grid_name_defaults_to_file_stem():
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "tiny.json"
        path.write_text(json.dumps({"schedules": [[1, 1]]}))
        assert ExperimentGrid.from_file(path).name == "tiny"


def test_invalid_grids_are_rejected():
    for bad in (
        {"partition": "weird"},
        {"schedules": [[0, 5]]},
        {"methods": ["Bogus"]},
        {"modes": ["sideways"]},
        {"colour": "blue"},
    ):
        try:
            smoke_grid(**bad)
        except ConfigError:
            continue
        raise AssertionError(f"expected ConfigError for {bad}")
    try:
        ExperimentGrid.from_file(CONFIGS / "missing.json")
    except ConfigError:
        pass
    else:
        raise AssertionError("expected ConfigError")


def test_cell_digest_ignores_execution_options():
    base = smoke_grid()
    cell = base.cells()[1]
    parallel = smoke_grid(parallel_clients=3, resumable=False)
    bigger = smoke_grid(watermark_size=30)
    assert base.cell_digest(cell) == parallel.cell_digest(parallel.cells()[1])
    assert base.cell_digest(cell) != bigger.cell_digest(bigger.cells()[1])


def test_empty_grid_runs_nothing():
    with tempfile.TemporaryDirectory() as tmp:
        store = run_grid(ExperimentGrid(name="empty"), ResultStore(Path(tmp) / "empty"), show_progress=False)
        assert store.results() == [] and store.failed == {}


def test_smoke_grid_end_to_end():
    grid = smoke_grid()
    none_cell, waffle_cell = (c.name for c in grid.cells())
    with tempfile.TemporaryDirectory() as tmp:
        store = run_grid(grid, ResultStore(Path(tmp) / grid.name), show_progress=False)
        assert store.failed == {}
        assert sorted(store.completed) == sorted([none_cell, waffle_cell])

        results = {r["cell"]: r for r in store.results()}
        assert results[none_cell]["overhead"] is None
        assert results[waffle_cell]["overhead"] is not None
        assert results[waffle_cell]["threshold"] == 1.0
        assert len(store.history(waffle_cell)) == 2
        for name in ("history.jsonl", "partition.json", "watermark.wm", "model.ckpt", "verification.json"):
            assert (store.cell_dir(waffle_cell) / name).exists(), name
        reports = store.attack_reports(waffle_cell)
        assert [r["attack"] for r in reports] == ["finetune", "prune"]
        assert all(r["config_digest"] == results[waffle_cell]["config_digest"] for r in reports)
        assert store.attack_reports(none_cell) == []

        # second pass skips everything
        run_grid(grid, ResultStore(store.root), show_progress=False)
        with open(store.results_file) as f:
            assert sum(1 for line in f if line.strip()) == 2

        tables = report_tables(ResultStore(store.root), show=False)
        delta = tables["utility_delta"]
        expected = (results[waffle_cell]["final_test_accuracy"] - results[none_cell]["final_test_accuracy"]) * 100
        assert len(delta) == 1 and abs(float(delta["utility_delta_pp"].iloc[0]) - expected) < 1e-9
        assert len(tables["overhead"]) == 1
        assert set(tables["attacks"]["attack"]) == {"finetune", "prune"}
        for name in ("watermark_accuracy", "utility_delta", "overhead", "attacks"):
            assert (store.root / "reports" / f"{name}.csv").exists()

        plots = plot_progression(ResultStore(store.root))
        assert set(plots) == {none_cell, waffle_cell}
        series = plots[waffle_cell]["series"]
        assert {"test", "watermark", "baseline test"} <= set(series)
        assert series["baseline test"] == plots[none_cell]["series"]["test"]
        assert Path(plots[waffle_cell]["path"]).exists()


def test_utility_deltas_use_matched_baseline():
    import pandas as pd

    keys = {"dataset": "synthetic", "partition": "iid", "local_passes": 1, "aggregation_rounds": 2}
    frame = pd.DataFrame([
        dict(keys, cell="a", mode="none", seed=0, final_test_accuracy=0.80),
        dict(keys, cell="b", mode="waffle", seed=0, final_test_accuracy=0.78),
        dict(keys, cell="c", mode="none", seed=1, final_test_accuracy=0.90),
        dict(keys, cell="d", mode="waffle", seed=1, final_test_accuracy=0.91),
    ])
    deltas = utility_deltas(frame).set_index("cell")["utility_delta_pp"]
    assert abs(deltas["b"] + 2.0) < 1e-9
    assert abs(deltas["d"] - 1.0) < 1e-9


def test_failed_cells_are_recorded():
    grid = smoke_grid(per_client=1000)
    with tempfile.TemporaryDirectory() as tmp:
        store = run_grid(grid, ResultStore(Path(tmp) / grid.name), show_progress=False)
        assert len(store.failed) == 2 and store.completed == {}
        assert all(error.startswith("PartitionError") for error in store.failed.values())
        reloaded = ResultStore(store.root)
        assert reloaded.failed == store.failed
        reloaded.reset()
        assert not reloaded.progress_file.exists() and reloaded.failed == {}


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"✓ {name}")
