#!/usr/bin/env python3
"""
Desk-scale acceptance run on mnist-mini (downloads MNIST and Fashion-MNIST on first use).

Trains waffle / baseline / pre-embed federations for three seeds, then checks
watermark persistence, utility, the pre-embedding failure mode, pruning and
fine-tuning resilience, trigger reversal on a planted backdoor, evasion
mechanics and bitwise determinism. Prints a results table and writes
runs/acceptance/summary.json.

    python desk_acceptance.py [--seeds 0 1 2] [--skip evasion ncleanse]
"""

import argparse
import json
import sys
import time
from pathlib import Path
from typing import Dict, List

import numpy as np
import torch
from rich.table import Table

from attacks import (
    anomaly_index,
    apply_trigger,
    build_evasion_detector,
    evaluate_evasion,
    flag_infected_classes,
    reverse_all_triggers,
    run_attack,
    select_coalition,
)
from datasets import load_dataset, partition_iid, partition_noniid
from errors import LabError
from federation import FederationConfig, run_federation
from settings import console, derive_seed, runs_root
from training import chained_seeds, configure_determinism, init_model, train_epochs
from verification import compute_t_acc
from watermark import generate_watermark

NUM_CLIENTS = 20
CLIENTS_PER_ROUND = 5
PER_CLIENT = 300
ROUNDS = 20
WATERMARK_SIZE = 100


def federation_config(mode: str, seed: int) -> FederationConfig:
    return FederationConfig.from_dict({
        "num_clients": NUM_CLIENTS,
        "clients_per_round": CLIENTS_PER_ROUND,
        "aggregation_rounds": ROUNDS,
        "client": {"local_passes": 1, "learning_rate": 0.1, "batch_size": 50},
        "embedding_mode": mode,
        "seed": seed,
        "arch": "cnn5",
    })


class Acceptance:
    def __init__(self, seeds: List[int], out_dir: Path):
        self.seeds = seeds
        self.out_dir = out_dir
        self.results: List[Dict] = []
        self.splits = load_dataset("mnist-mini")
        self.ood = load_dataset("fashion-mnist")
        self.t_acc = compute_t_acc(WATERMARK_SIZE, 10)
        self.runs: Dict = {}
        self.shards: Dict = {}
        self.watermarks: Dict = {}

    def record(self, criterion: str, passed: bool, detail: str, **values) -> None:
        colour = "green" if passed else "red"
        console.print(f"[{colour}]{criterion}: {'PASS' if passed else 'FAIL'}[/{colour}] {detail}")
        self.results.append({"criterion": criterion, "passed": bool(passed), "detail": detail, **values})

    # -- shared federations --

    def train_federations(self) -> None:
        train, test = self.splits
        for seed in self.seeds:
            shards = partition_iid(train, NUM_CLIENTS, PER_CLIENT, derive_seed(seed, "partition"))
            wm = generate_watermark("WafflePattern", train.image_shape, 10, WATERMARK_SIZE, derive_seed(seed, "watermark"))
            self.shards[seed], self.watermarks[seed] = shards, wm
            for mode in ("waffle", "none", "pre_embed"):
                console.print(f"[cyan]Training {mode} federation, seed {seed}[/cyan]")
                started = time.perf_counter()
                self.runs[(mode, seed)] = run_federation(
                    federation_config(mode, seed), train, test, shards, wm,
                    run_dir=self.out_dir / f"{mode}_s{seed}",
                )
                console.print(f"  {mode} done in {time.perf_counter() - started:.0f}s")

    # -- criteria --

    def threshold(self) -> None:
        self.record("1 threshold", self.t_acc == 0.47, f"T_acc(100, 10, 2^-64) = {self.t_acc}", t_acc=self.t_acc)

    def watermark_persistence(self) -> None:
        history = self.runs[("waffle", self.seeds[0])].history
        per_round = [r.watermark_accuracy for r in history]
        passed = all(a >= self.t_acc for a in per_round) and per_round[-1] >= 0.90
        self.record("3 watermark persists", passed, f"min {min(per_round):.3f}, final {per_round[-1]:.3f}", per_round=per_round)

    def utility(self) -> None:
        seed = self.seeds[0]
        waffle = self.runs[("waffle", seed)].history[-1].test_accuracy
        base = self.runs[("none", seed)].history[-1].test_accuracy
        delta = (waffle - base) * 100
        self.record("4 utility within 5pp", abs(delta) <= 5.0, f"waffle {waffle:.3f} vs baseline {base:.3f} ({delta:+.2f}pp)")

    def pre_embedding(self) -> None:
        pre = [self.runs[("pre_embed", s)].history[-1].watermark_accuracy for s in self.seeds]
        waffle = [self.runs[("waffle", s)].history[-1].watermark_accuracy for s in self.seeds]
        mean_pre, mean_waffle = float(np.mean(pre)), float(np.mean(waffle))
        passed = mean_pre < self.t_acc or (mean_waffle - mean_pre) >= 0.30
        self.record("5 pre-embedding fades", passed, f"pre_embed {mean_pre:.3f} vs waffle {mean_waffle:.3f}", pre=pre, waffle=waffle)

    def _attack(self, kind: str, seed: int, params: Dict, coalition_size=1):
        train, test = self.splits
        result = self.runs[("waffle", seed)]
        coalition = select_coalition(self.shards[seed], coalition_size, derive_seed(seed, "coalition"))
        return run_attack(
            kind, result.model, self.watermarks[seed], train, test, coalition,
            federation_config("waffle", seed).client, seed, params, ood_pool=self.ood.test,
        )

    def pruning(self) -> None:
        outcomes = []
        for seed in self.seeds:
            report = self._attack("prune", seed, {"prune_rate": 0.9, "finetune_epochs": 20})
            outcomes.append({"seed": seed, "verdict": report.verdict, "utility_drop": report.utility_drop})
        passed = all(o["verdict"] or o["utility_drop"] > 5.0 for o in outcomes)
        self.record("6 pruning disjunction", passed, "; ".join(
            f"s{o['seed']}: verify={o['verdict']} drop={o['utility_drop']:.1f}pp" for o in outcomes), outcomes=outcomes)

    def finetuning(self) -> None:
        started = time.perf_counter()
        report = self._attack("finetune", self.seeds[0], {"epochs": 100})
        elapsed = time.perf_counter() - started
        self.record("7 fine-tuning resilience", report.verdict,
                    f"WM {report.post_watermark_accuracy:.3f} after 100 epochs ({elapsed:.0f}s)",
                    trajectory=report.trajectory)

    def trigger_reversal(self) -> None:
        train, test = self.splits
        target = 0
        x, y = train.tensors()
        h, w, c = train.image_shape
        mask = torch.zeros(h, w)
        mask[h - 4:h - 1, w - 4:w - 1] = 1.0
        pattern = torch.ones(c, h, w)
        gen = torch.Generator().manual_seed(derive_seed("planted-backdoor"))
        poisoned = torch.randperm(len(x), generator=gen)[: len(x) // 10]
        x_bd, y_bd = x.clone(), y.clone()
        x_bd[poisoned] = apply_trigger(x_bd[poisoned], mask, pattern)
        y_bd[poisoned] = target

        model = init_model("cnn5", train.image_shape, 10, derive_seed("planted-backdoor", "init"))
        train_epochs(model.module, (x_bd, y_bd), lr=0.05, batch_size=50,
                     pass_seeds=chained_seeds(derive_seed("planted-backdoor", "train"), 5), momentum=0.5)
        tx, ty = test.tensors()
        planted_asr = float((model.predict(apply_trigger(tx[ty != target], mask, pattern)) == target).float().mean())

        triggers = reverse_all_triggers(model, (tx, ty), steps=500, seed=derive_seed("planted-backdoor", "reverse"))
        norms = [t.l1_norm for t in triggers]
        index = anomaly_index(norms)
        flagged = flag_infected_classes(norms)
        reversed_target = triggers[target]
        passed = (
            reversed_target.success_rate >= 0.75
            and reversed_target.l1_norm <= 3 * float(mask.sum())
            and index > 2.0
            and target in flagged
        )
        self.record(
            "8 trigger reversal", passed,
            f"planted ASR {planted_asr:.2f}; reversed ASR {reversed_target.success_rate:.2f}, "
            f"L1 {reversed_target.l1_norm:.1f} (planted {float(mask.sum()):.0f}), index {index:.2f}, flagged {flagged}",
            norms=norms, anomaly_index=index,
        )

    def evasion(self) -> None:
        train, test = self.splits
        ood = torch.from_numpy(np.array(self.ood.test.images.transpose(0, 3, 1, 2), dtype=np.float32, order="C"))
        mechanics_ok, fpr_iid, fpr_noniid = True, [], []
        for seed in self.seeds:
            model, wm = self.runs[("waffle", seed)].model, self.watermarks[seed]
            pooled = select_coalition(self.shards[seed], 0.5, derive_seed(seed, "coalition"))
            noniid_shards = partition_noniid(train, NUM_CLIENTS, 2, derive_seed(seed, "noniid"))
            single = select_coalition(noniid_shards, 1, derive_seed(seed, "coalition"))
            for coalition, bucket in ((pooled, fpr_iid), (single, fpr_noniid)):
                detector = build_evasion_detector(model, coalition.samples(train)[0], ood, seed=seed)
                curve = evaluate_evasion(detector, wm, test.tensors()[0])
                monotone = all(a >= b for a, b in zip(curve.tpr, curve.tpr[1:])) and all(
                    a >= b for a, b in zip(curve.fpr, curve.fpr[1:]))
                endpoints = (curve.tpr[0], curve.fpr[0]) == (1.0, 1.0) and (curve.tpr[-1], curve.fpr[-1]) == (0.0, 0.0)
                mechanics_ok = mechanics_ok and monotone and endpoints
                bucket.append(curve.operating_fpr)
        passed = mechanics_ok and float(np.mean(fpr_noniid)) > float(np.mean(fpr_iid))
        self.record("9 evasion mechanics", passed,
                    f"monotone+endpoints={mechanics_ok}; FPR non-IID {np.mean(fpr_noniid):.3f} vs IID {np.mean(fpr_iid):.3f}",
                    fpr_iid=fpr_iid, fpr_noniid=fpr_noniid)

    def determinism(self) -> None:
        train, test = self.splits
        seed = self.seeds[0]
        rerun = run_federation(
            federation_config("waffle", seed), train, test, self.shards[seed], self.watermarks[seed],
            run_dir=self.out_dir / f"waffle_s{seed}_rerun",
        )

        def strip(history):
            return [{k: v for k, v in r.to_dict().items() if k != "wall_time"} for r in history]

        first = self.runs[("waffle", seed)]
        passed = strip(first.history) == strip(rerun.history) and first.final_params.equals(rerun.final_params)
        self.record("10 determinism", passed, f"{len(rerun.history)} rounds compared")

    def summary(self) -> bool:
        table = Table(title="Desk acceptance")
        table.add_column("Criterion")
        table.add_column("Result")
        table.add_column("Detail")
        for r in self.results:
            table.add_row(r["criterion"], "[green]PASS[/green]" if r["passed"] else "[red]FAIL[/red]", r["detail"])
        console.print(table)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        with open(self.out_dir / "summary.json", "w") as f:
            json.dump(self.results, f, indent=2, default=float)
        return all(r["passed"] for r in self.results)


def main():
    parser = argparse.ArgumentParser(description="Desk-scale acceptance run")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--skip", nargs="*", default=[], choices=["prune", "finetune", "ncleanse", "evasion", "determinism"])
    parser.add_argument("--out", default=None)
    args = parser.parse_args()

    configure_determinism()
    out_dir = Path(args.out) if args.out else runs_root() / "acceptance"
    try:
        acceptance = Acceptance(args.seeds, out_dir)
        acceptance.threshold()
        acceptance.train_federations()
        acceptance.watermark_persistence()
        acceptance.utility()
        acceptance.pre_embedding()
        if "prune" not in args.skip:
            acceptance.pruning()
        if "finetune" not in args.skip:
            acceptance.finetuning()
        if "ncleanse" not in args.skip:
            acceptance.trigger_reversal()
        if "evasion" not in args.skip:
            acceptance.evasion()
        if "determinism" not in args.skip:
            acceptance.determinism()
    except LabError as e:
        console.print(f"[red]Acceptance run failed: {e}[/red]")
        sys.exit(2)

    sys.exit(0 if acceptance.summary() else 1)


if __name__ == "__main__":
    main()
