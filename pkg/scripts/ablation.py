#!/usr/bin/env python3
"""Module ablation on the synthetic dataset.

Trains one model per (variant, seed) with the default recipe, evaluates it on
the held-out fold and prints a table of mean mIoU per variant with the delta
to the full model. Results also go to ``<out>/ablation.csv``.

    python scripts/ablation.py --seeds 0 1 2 --eval-episodes 1000
    python scripts/ablation.py --variants full no_multi_similarity --episodes 500
"""
from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from msanet.config import RunConfig
from msanet.dataset import generate_synthetic_dataset, load_dataset
from msanet.episodes import FoldSpec
from msanet.evaluation import evaluate
from msanet.model import build_model
from msanet.trainer import train

VARIANTS = {
    "full": {},
    "no_multi_similarity": {"multi_similarity": False},
    "no_attention": {"attention": False},
    "no_prototype": {"prototype": False},
    "no_prior_mask": {"prior_mask": False},
    "no_multi_similarity_no_prior_mask": {"multi_similarity": False, "prior_mask": False},
    "query_only": {
        "multi_similarity": False, "attention": False, "prototype": False, "prior_mask": False,
        "allow_query_only": True,
    },
}


def run_variant(manifest, overrides: dict, seed: int, episodes: int, eval_episodes: int, eval_runs: int) -> dict:
    cfg = RunConfig(seed=seed, episodes=episodes, eval_episodes=eval_episodes, eval_runs=eval_runs, **overrides)
    model = build_model(cfg.backbone_config(), cfg.model_config())
    start = time.perf_counter()
    result = train(cfg.train_config(), manifest, model)
    spec = FoldSpec(manifest.classes, cfg.fold, cfg.folds)
    rep = evaluate(model, manifest, spec, episodes_per_run=eval_episodes, runs=eval_runs, base_seed=seed)
    return {
        "miou": rep.miou,
        "fbiou": rep.fbiou,
        "final_loss": float(np.mean(result.losses[-13:])) if result.losses else float("nan"),
        "seconds": time.perf_counter() - start,
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--data", default="data", help="dataset directory (generated with defaults if missing)")
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--variants", nargs="+", default=["full", "no_multi_similarity"], choices=sorted(VARIANTS))
    ap.add_argument("--seeds", nargs="+", type=int, default=[0])
    ap.add_argument("--episodes", type=int, default=2000, help="training episodes per model")
    ap.add_argument("--eval-episodes", type=int, default=1000)
    ap.add_argument("--eval-runs", type=int, default=1)
    args = ap.parse_args(argv)

    data = Path(args.data)
    manifest = load_dataset(data) if (data / "manifest.txt").exists() else \
        generate_synthetic_dataset(RunConfig().dataset_config(), data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    for name in args.variants:
        for seed in args.seeds:
            r = run_variant(manifest, VARIANTS[name], seed, args.episodes, args.eval_episodes, args.eval_runs)
            rows.append({"variant": name, "seed": seed, **r})
            print(f"{name:22s} seed {seed}: mIoU {r['miou']:.4f}  FB-IoU {r['fbiou']:.4f}  "
                  f"loss {r['final_loss']:.4f}  ({r['seconds']:.0f}s)", flush=True)

    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)

    means = {n: np.mean([r["miou"] for r in rows if r["variant"] == n]) for n in args.variants}
    stds = {n: np.std([r["miou"] for r in rows if r["variant"] == n]) for n in args.variants}
    base = means.get("full")
    print("\n| variant | mIoU (mean over seeds) | std | delta vs full |")
    print("|---|---|---|---|")
    for n in args.variants:
        delta = "" if base is None or n == "full" else f"{means[n] - base:+.4f}"
        print(f"| {n} | {means[n]:.4f} | {stds[n]:.4f} | {delta} |")
    return 0


if __name__ == "__main__":
    sys.exit(main())
