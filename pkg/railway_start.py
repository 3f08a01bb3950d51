#!/usr/bin/env python3
"""
Railway startup script for long-running experiment grids.
Runs the grid named by WAFFLE_GRID with resume enabled and retries failed cells
with progressive backoff until the grid is clean or the retry budget is spent.
"""

import os
import signal
import sys
import time

# Add current directory to path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

try:
    from errors import LabError
    from experiments import ExperimentGrid, ResultStore, report_tables, run_grid
    from settings import console, get_env
except ImportError as e:
    print(f"❌ Import error: {e}")
    print("📁 Current directory:", os.getcwd())
    sys.exit(1)


def signal_handler(sig, frame):
    console.print("[yellow]Gracefully shutting down - completed cells are saved[/yellow]")
    sys.exit(0)


def main():
    console.print("🚀 Starting waffle-lab grid runner on Railway...")
    console.print(f"⏰ Start time: {time.strftime('%Y-%m-%d %H:%M:%S')}")

    signal.signal(signal.SIGINT, signal_handler)
    signal.signal(signal.SIGTERM, signal_handler)

    try:
        grid_path = get_env("WAFFLE_GRID")
        grid = ExperimentGrid.from_file(grid_path)
    except LabError as e:
        console.print(f"[red]❌ {e}[/red]")
        console.print("🔧 Set WAFFLE_GRID in the Railway dashboard under 'Variables' (e.g. configs/full_mnist.json)")
        sys.exit(2)

    workers = int(get_env("WAFFLE_WORKERS", "1"))
    store = ResultStore.for_grid(grid)
    console.print(f"📊 Grid: {grid.name} ({len(grid.cells())} cells), store: {store.root}, workers: {workers}")

    max_retries = 3
    retry_count = 0

    while retry_count < max_retries:
        console.print(f"🔄 Running grid (attempt {retry_count + 1}/{max_retries})")
        run_grid(grid, store, workers=workers, resume=True)

        if not store.failed:
            console.print("[green]✅ Grid completed successfully![/green]")
            if store.completed:
                report_tables(store)
            return

        retry_count += 1
        console.print(f"[red]❌ {len(store.failed)} cell(s) failed (attempt {retry_count}/{max_retries})[/red]")
        if retry_count < max_retries:
            wait_time = 60 * retry_count  # Progressive backoff
            console.print(f"🔄 Retrying failed cells in {wait_time} seconds...")
            time.sleep(wait_time)

    console.print("[red]❌ Max retries reached. Failed cells stay recorded in progress.json.[/red]")
    sys.exit(3)


if __name__ == "__main__":
    main()
