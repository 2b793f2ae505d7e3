#!/usr/bin/env python3
"""End-to-end desk-scale demo: synthesize data, train, fuse, evaluate.

Writes everything under --out and finishes by printing the per-pair
metric table. Deterministic for a fixed seed; the default budget runs in
about a minute on a laptop CPU.
"""
import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from semfuse.cli import main as cli_main
from semfuse.data import write_dataset


def run(argv):
    rc = cli_main(argv)
    if rc != 0:
        raise SystemExit(f"command {argv[0]} failed with exit code {rc}")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="demo_out", help="artifact directory")
    ap.add_argument("--pairs", type=int, default=4)
    ap.add_argument("--size", type=int, default=32, help="square image side")
    ap.add_argument("--steps", type=int, default=40)
    ap.add_argument("--batch", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    data = out / "data"
    run_dir = out / "run"
    fused = out / "fused"

    print(f"== writing {args.pairs} synthetic pairs to {data}")
    write_dataset(data, args.pairs, h=args.size, w=args.size, seed=args.seed)

    print(f"== training for {args.steps} alternating steps")
    run(["train", "--data", str(data), "--out", str(run_dir),
         "--steps", str(args.steps), "--batch", str(args.batch),
         "--crop", str(args.size), "--seed", str(args.seed)])

    print("== fusing with the trained sub-network")
    run(["fuse", "--data", str(data), "--ckpt", str(run_dir),
         "--out", str(fused)])

    print("== evaluating fused outputs")
    run(["eval", "--data", str(data), "--fused", str(fused),
         "--out", str(run_dir)])

    rows = (run_dir / "metrics.csv").read_text().splitlines()
    header = rows[0].split(",")
    print()
    print(f"{header[0]:>24s} " + " ".join(f"{h:>12s}" for h in header[1:]))
    for row in rows[1:]:
        cells = row.split(",")
        print(f"{Path(cells[0]).name:>24s} " + " ".join(
            f"{float(c):12.4f}" for c in cells[1:]))
    print(f"\nartifacts: {run_dir}/train.csv, {run_dir}/metrics.csv, "
          f"{fused}/*.fused.pgm")


if __name__ == "__main__":
    main()
