"""Run one or more ablation grids and write markdown tables.

    python3 scripts/run_ablations.py --grids mga,combine --finetune-steps 100 --out runs/ablations
"""
import argparse
import logging
from pathlib import Path

import torch

from valor.ablation import GRIDS, run_ablation
from valor.config import TrainConfig, load_config


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--grids", default=",".join(sorted(GRIDS)))
    ap.add_argument("--config")
    ap.add_argument("--steps", type=int, help="pretraining steps per cell")
    ap.add_argument("--finetune-steps", type=int, default=0)
    ap.add_argument("--out", default="runs/ablations")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    torch.set_num_threads(1)
    base = load_config(args.config) if args.config else TrainConfig()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for grid in args.grids.split(","):
        table = run_ablation(grid, base, steps=args.steps, finetune_steps=args.finetune_steps)
        text = table.format()
        (out / f"ablation_{grid}.md").write_text(text + "\n", encoding="utf-8")
        print(text, "\n")


if __name__ == "__main__":
    main()
