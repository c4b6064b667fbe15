#!/usr/bin/env python3
"""Generate data, train, evaluate and visualise through the CLI in one go.

    python scripts/run_end_to_end.py --out runs/e2e
    python scripts/run_end_to_end.py --out runs/quick -- --episodes 200 --eval_episodes 100

Anything after ``--`` is forwarded to every CLI call as config overrides.
"""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from msanet.cli import main as msanet


def step(name: str, argv: list[str]) -> None:
    print(f"\n$ msanet {' '.join(argv)}", flush=True)
    start = time.perf_counter()
    code = msanet(argv)
    if code:
        sys.exit(f"{name} failed with exit code {code}")
    print(f"[{name} done in {time.perf_counter() - start:.0f}s]", flush=True)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/e2e")
    ap.add_argument("--config", help="optional key = value config file")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("extra", nargs="*", help="config overrides after --, e.g. -- --episodes 200")
    args = ap.parse_args(argv)

    out = Path(args.out)
    common = ["--seed", str(args.seed), *(["--config", args.config] if args.config else []), *args.extra]
    data = str(out / "data")
    step("generate", ["generate", "--out", data, *common])
    run = ["--out", str(out), "--data_dir", data, *common]
    step("train", ["train", *run])
    step("eval", ["eval", *run])
    step("viz", ["viz", *run])
    print(f"\nreport: {out / 'eval_report.txt'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
