"""Pretrain the default desk-scale configuration and print the final retrieval metrics.

    python3 scripts/pretrain_default.py --out runs/default [--steps 600]
"""
import argparse
import json
import logging

import torch

from valor.config import TrainConfig, load_config
from valor.trainer import pretrain


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/default")
    ap.add_argument("--config")
    ap.add_argument("--steps", type=int)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    torch.set_num_threads(1)
    cfg = load_config(args.config) if args.config else TrainConfig()
    _, log = pretrain(cfg, args.out, steps=args.steps)
    final = log[-1]
    print(json.dumps({k: v for k, v in final.items() if "R@1" in k or k == "step"}, indent=2))


if __name__ == "__main__":
    main()
