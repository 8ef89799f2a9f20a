"""Audio concept density of the synthetic caption corpus against its audio ontology.

    python3 scripts/acd_report.py [--count 1000] [--mode av]
"""
import argparse

import numpy as np

from valor.acd import acd, corpus_stats
from valor.config import GeneratorConfig
from valor.data import SyntheticGenerator


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--count", type=int, default=1000)
    ap.add_argument("--mode", default="av", choices=("av", "v", "a"))
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    gen = SyntheticGenerator(GeneratorConfig())
    rng = np.random.default_rng(args.seed)
    corpus = [gen.example(rng, mode=args.mode).caption for _ in range(args.count)]
    onto = gen.audio_ontology()
    stats = corpus_stats(corpus, onto)
    print(f"captions {stats.num_captions}  mean length {stats.average_length:.2f}  ACD {acd(corpus, onto):.4f}")
    for phrase, n in stats.phrase_histogram.items():
        print(f"  {phrase:<24} {n}")


if __name__ == "__main__":
    main()
