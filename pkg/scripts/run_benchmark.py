#!/usr/bin/env python3
"""Cross-validated strategy benchmark on the synthetic layered dataset.

Runs the headline comparison: four query strategies over a 20-volume
synthetic OCT-like pool, 5-fold cross-validation, three RNG seeds, learning
curves from the 10-sample seed round up to the full pool. Writes results.csv
and prints the budget-by-strategy dice table.

Scale it down for a smoke run:
    python3 scripts/run_benchmark.py --volumes 4 --slices 2 --folds 2 \
        --seeds 1 --strategies RANDOM,ENT --out /tmp/results.csv
"""

import argparse
import os
import time
from pathlib import Path

from aloop.config import parse_run_config, validate_run_config
from aloop.experiment import render_table, run_experiment
from aloop.simlab import SyntheticSpec

RUN_CFG = """\
ACTIVE_LEARNING:
    strategy: ENT
    seed_size: {seed_size}
    query_size: {query_size}
    rounds: {rounds}
    mc_passes: 4
    rng_seed: 0
MODEL:
    TRUNK:
        NAME: unet
        UNET:
            n_channels: 1
            base_channels: 8
            dropout: 0.5
DATA:
    TRAIN:
        BATCHSIZE_PER_REPLICA: 8
        TRANSFORMS:
        - name: ToTensor
        - name: Normalize
          mean: [0.5]
          std: [0.5]
OPTIMIZER:
    name: sgd
    momentum: 0.9
    lr: 0.15
    num_epochs: {epochs}
LOSS:
    name: dice_loss
    dice_loss:
        softmax: True
        ignore_index: -1
"""


def parse_args():
    ap = argparse.ArgumentParser(description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--volumes", type=int, default=20)
    ap.add_argument("--slices", type=int, default=10)
    ap.add_argument("--classes", type=int, default=4)
    ap.add_argument("--folds", type=int, default=5)
    ap.add_argument("--seeds", type=int, default=3, help="number of RNG seeds (0..n-1)")
    ap.add_argument("--seed-size", type=int, default=10)
    ap.add_argument("--query-size", type=int, default=10)
    ap.add_argument("--rounds", type=int, default=5)
    ap.add_argument("--epochs", type=int, default=12)
    ap.add_argument("--strategies", default="ENT,MCDR,CORESET,RANDOM")
    ap.add_argument("--workers", type=int, default=min(4, os.cpu_count() or 1))
    ap.add_argument("--out", default="results.csv")
    ap.add_argument("--keep-workspaces", metavar="DIR", default=None,
                    help="keep per-cell workspaces under DIR (default: temporary)")
    ap.add_argument("--no-full", action="store_true",
                    help="skip the 100%%-budget reference fit")
    return ap.parse_args()


def main():
    args = parse_args()
    cfg = parse_run_config(RUN_CFG.format(seed_size=args.seed_size,
                                          query_size=args.query_size,
                                          rounds=args.rounds, epochs=args.epochs))
    violations = validate_run_config(cfg)
    assert not violations, violations
    spec = SyntheticSpec(volumes=args.volumes, slices_per_volume=args.slices,
                         height=64, width=64, classes=args.classes, rng_seed=0)
    names = [s.strip() for s in args.strategies.split(",") if s.strip()]

    t0 = time.perf_counter()
    curve = run_experiment(cfg, spec, names, folds=args.folds,
                           seeds=range(args.seeds), out_dir=args.keep_workspaces,
                           workers=args.workers, include_full=not args.no_full)
    elapsed = time.perf_counter() - t0

    curve.write_csv(args.out)
    print(render_table(curve))
    print(f"\n{len(curve.rows)} rows -> {Path(args.out).resolve()} "
          f"({elapsed / 60.0:.1f} min, {args.workers} workers)")
    if curve.failures:
        raise SystemExit(f"{len(curve.failures)} cells failed")


if __name__ == "__main__":
    main()
