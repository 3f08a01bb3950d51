#!/usr/bin/env python3
"""
waffle-lab: run watermarking grids, attack and verify checkpoints, build reports.

    python waffle_lab.py run configs/desk_mnist_mini.json --resume --workers 2
    python waffle_lab.py attack --attack prune --coalition 1 --checkpoint runs/x/cells/c/model.ckpt \
        --watermark runs/x/cells/c/watermark.wm --partition runs/x/cells/c/partition.json
    python waffle_lab.py verify --checkpoint model.ckpt --watermark watermark.wm
    python waffle_lab.py report runs/desk-mnist-mini
    python waffle_lab.py plot runs/desk-mnist-mini
    python waffle_lab.py watermark --method WafflePattern --dataset synthetic --out wm.wm
    python waffle_lab.py commitment wm.wm

Exit codes: 0 success, 2 configuration error, 3 grid finished with failed cells, 1 anything else.
"""

import argparse
import json
import sys
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional

from rich.panel import Panel

from errors import EXIT_CELL_FAILURES, EXIT_CONFIG, EXIT_FAILURE, EXIT_OK, CellFailures, ConfigError, LabError
from settings import CODE_VERSION, SCHEMA_VERSION, console


def _json_option(text: Optional[str], flag: str) -> Dict:
    if not text:
        return {}
    try:
        value = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{flag} must be a JSON object: {e}") from e
    if not isinstance(value, dict):
        raise ConfigError(f"{flag} must be a JSON object")
    return value


def parse_coalition(text: str) -> int | float:
    """'3' is a count of clients, '0.1' a fraction of all clients."""
    try:
        return float(text) if "." in text else int(text)
    except ValueError as e:
        raise ConfigError(f"--coalition expects a count or a fraction, got '{text}'") from e


def parse_epsilon(text: str) -> Fraction:
    """Accepts '2^-64', '1/1000' or a decimal."""
    try:
        if "^" in text:
            base, exp = text.split("^", 1)
            return Fraction(int(base)) ** int(exp)
        return Fraction(text)
    except (ValueError, ZeroDivisionError) as e:
        raise ConfigError(f"Invalid epsilon '{text}'") from e


def parse_params(items: List[str]) -> Dict:
    params = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--param expects key=value, got '{item}'")
        key, raw = item.split("=", 1)
        try:
            params[key] = json.loads(raw)
        except json.JSONDecodeError:
            params[key] = raw
    return params


# ---------------------------- Subcommands ----------------------------

def cmd_run(args) -> int:
    from experiments import ExperimentGrid, ResultStore, run_grid

    grid = ExperimentGrid.from_file(args.grid)
    store = ResultStore.for_grid(grid, args.runs_root)
    if args.reset:
        store.reset()
    console.print(Panel(
        f"Grid [bold]{grid.name}[/bold]: {len(grid.cells())} cells on {grid.dataset} ({grid.partition})\n"
        f"Store: {store.root}\nCode version {CODE_VERSION}, schema {SCHEMA_VERSION}",
        title="waffle-lab run",
    ))
    run_grid(grid, store, workers=args.workers, resume=args.resume, show_progress=not args.quiet)
    if store.failed:
        raise CellFailures(store.failed)
    return EXIT_OK


def cmd_attack(args) -> int:
    from attacks import run_attack, select_coalition
    from datasets import load_dataset, load_partition_manifest
    from experiments import append_attack_report
    from settings import digest_of
    from training import TrainConfig, load_checkpoint
    from watermark import load_watermark

    model = load_checkpoint(args.checkpoint)
    wm = load_watermark(args.watermark)
    splits = load_dataset(args.dataset, **_json_option(args.dataset_options, "--dataset-options"))
    shards = load_partition_manifest(args.partition, splits.train)
    client_cfg = TrainConfig.from_dict(_json_option(args.client, "--client"))
    ood = None
    if args.attack == "evasion":
        ood = load_dataset(args.ood_dataset, **_json_option(args.ood_options, "--ood-options")).test
    coalition = select_coalition(shards, parse_coalition(args.coalition), args.seed)
    report = run_attack(
        args.attack, model, wm, splits.train, splits.test, coalition, client_cfg, args.seed,
        parse_params(args.param), ood_pool=ood, show_progress=not args.quiet,
    )
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "attacks.jsonl"
    digest = digest_of({"checkpoint": str(args.checkpoint), "commitment": wm.commitment,
                        "client": client_cfg.to_dict(), "seed": args.seed})
    append_attack_report(out, dict(report.to_dict(), config_digest=digest,
                                   code_version=CODE_VERSION, schema_version=SCHEMA_VERSION))
    console.print(f"[green]Report appended to {out}[/green]")
    return EXIT_OK


def cmd_verify(args) -> int:
    from training import load_checkpoint
    from verification import check_commitment, verify
    from watermark import load_watermark

    model = load_checkpoint(args.checkpoint)
    wm = load_watermark(args.watermark)
    result = verify(model, wm, parse_epsilon(args.epsilon))
    output = result.to_dict()
    if args.commitment:
        output["commitment_matches"] = check_commitment(wm, args.commitment)
    print(json.dumps(output, indent=2))
    colour = "green" if result.verdict else "red"
    console.print(f"[{colour}]Watermark accuracy {result.watermark_accuracy:.3f} vs T_acc {result.threshold:.2f}: "
                  f"{'ownership verified' if result.verdict else 'not verified'}[/{colour}]")
    return EXIT_OK


def _store_from_dir(runs_dir: str):
    from experiments import ResultStore

    path = Path(runs_dir)
    if not path.is_dir():
        raise ConfigError(f"Runs directory not found: {path}")
    return ResultStore(path)


def cmd_report(args) -> int:
    from experiments import report_tables

    report_tables(_store_from_dir(args.runs_dir), args.out)
    return EXIT_OK


def cmd_plot(args) -> int:
    from experiments import plot_progression

    plot_progression(_store_from_dir(args.runs_dir), args.metric, args.out)
    return EXIT_OK


def cmd_watermark(args) -> int:
    from datasets import load_dataset
    from watermark import audit, generate_watermark, save_watermark

    splits = load_dataset(args.dataset, **_json_option(args.dataset_options, "--dataset-options"))
    external = None
    if args.method == "unRelate":
        external = load_dataset(args.ood_dataset, **_json_option(args.ood_options, "--ood-options")).train
    wm = generate_watermark(
        args.method, splits.train.image_shape, splits.train.num_classes, args.size, args.seed,
        train_pool=splits.train, external_pool=external,
    )
    commitment = save_watermark(wm, args.out)
    checks = audit(wm)
    for name, ok in checks.items():
        console.print(f"{'[green]ok[/green]' if ok else '[red]FAIL[/red]'}  {name}")
    print(json.dumps({"path": str(args.out), "commitment": commitment, "size": len(wm), "method": wm.method.value}))
    return EXIT_OK


def cmd_commitment(args) -> int:
    from watermark import audit, load_watermark

    wm = load_watermark(args.watermark)
    print(json.dumps({"commitment": wm.commitment, "audit": audit(wm)}, indent=2))
    return EXIT_OK


# ---------------------------- Entry point ----------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="waffle-lab", description="Federated watermarking lab")
    parser.add_argument("--quiet", action="store_true", help="Hide progress bars")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="Run an experiment grid")
    p.add_argument("grid", help="Grid JSON file")
    p.add_argument(
        "--resume", action=argparse.BooleanOptionalAction, default=True,
        help="Skip cells already completed with the same config digest (default: on)",
    )
    p.add_argument("--reset", action="store_true", help="Clear progress before running")
    p.add_argument("--workers", type=int, default=1, help="Cells run in parallel")
    p.add_argument("--runs-root", default=None, help="Results root (default: $WAFFLE_RUNS_ROOT or ./runs)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("attack", help="Attack a trained checkpoint")
    p.add_argument("--attack", required=True, choices=["finetune", "prune", "ncleanse", "evasion"])
    p.add_argument("--coalition", default="1", help="Client count (e.g. 3) or fraction (e.g. 0.1)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--watermark", required=True)
    p.add_argument("--partition", required=True, help="partition.json written by the run")
    p.add_argument("--dataset", default="mnist-mini")
    p.add_argument("--dataset-options", default=None, help="JSON object passed to the dataset loader")
    p.add_argument("--ood-dataset", default="fashion-mnist")
    p.add_argument("--ood-options", default=None)
    p.add_argument("--client", default=None, help="JSON client training config")
    p.add_argument("--param", action="append", help="Attack parameter key=value (repeatable)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="attacks.jsonl to append to")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("verify", help="Check ownership of a checkpoint (JSON on stdout)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--watermark", required=True)
    p.add_argument("--epsilon", default="2^-64")
    p.add_argument("--commitment", default=None, help="Registered watermark digest to compare")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("report", help="Summary tables for a runs directory")
    p.add_argument("runs_dir")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("plot", help="Progression plots for a runs directory")
    p.add_argument("runs_dir")
    p.add_argument("--metric", default="both", choices=["test", "watermark", "both"])
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("watermark", help="Generate a watermark set file")
    p.add_argument("--method", default="WafflePattern", choices=["WafflePattern", "EmbeddedContent", "unRelate", "unStruct"])
    p.add_argument("--dataset", default="mnist-mini")
    p.add_argument("--dataset-options", default=None)
    p.add_argument("--ood-dataset", default="fashion-mnist")
    p.add_argument("--ood-options", default=None)
    p.add_argument("--size", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_watermark)

    p = sub.add_parser("commitment", help="Print the digest of a watermark file")
    p.add_argument("watermark")
    p.set_defaults(func=cmd_commitment)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        console.print(f"[red]Configuration error: {e}[/red]")
        return EXIT_CONFIG
    except CellFailures as e:
        console.print(f"[red]{e}[/red]")
        for cell, error in sorted(e.failed.items()):
            console.print(f"[red]  {cell}: {error}[/red]")
        return EXIT_CELL_FAILURES
    except LabError as e:
        console.print(f"[red]Error: {e}[/red]")
        return EXIT_FAILURE
    except KeyboardInterrupt:
        console.print("[yellow]Interrupted - progress has been saved[/yellow]")
        return EXIT_FAILURE
    except Exception as e:
        console.print(f"[red]Unexpected error: {type(e).__name__}: {e}[/red]")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
